import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uma2.funnel import FunnelLog, write_logs
from uma2.sampling import (
    Corpus,
    IntegrityError,
    InteractionRecord,
    LogParseError,
    SamplerCounters,
    SamplingCounts,
    SpaceLabel,
    Strategy,
    build_batches,
    ingest_logs,
    sample_negatives,
    space_label,
)


def make_corpus(rows, num_users=3, num_items=10, dim=2):
    """rows: (user, item, clicked, exposed, recalled)."""
    rows = np.array(rows, dtype=np.int64).reshape(-1, 5)
    uf = np.arange(num_users * dim, dtype=float).reshape(num_users, dim)
    itf = np.arange(num_items * dim, dtype=float).reshape(num_items, dim) / 10
    return Corpus(np.arange(num_users), uf, np.arange(num_items), itf,
                  rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], rows[:, 4])


@pytest.mark.parametrize("flags,label", [((1, 1, 1), SpaceLabel.POSITIVE), ((0, 1, 1), SpaceLabel.A),
                                         ((0, 0, 1), SpaceLabel.B), ((0, 0, 0), SpaceLabel.C)])
def test_space_label_definition(flags, label):
    assert space_label(*flags) == label


def _log_text(lines):
    head = "#schema=uma2-log-v1\tuser_id\titem_id\tclicked\texposed\trecalled\tuser_features\titem_features\n"
    return head + "".join(lines)


def test_ingest_labels(tmp_path):
    p = tmp_path / "a.log"
    p.write_text(_log_text(["1\t5\t1\t1\t1\t0.1,0.2\t1.0,2.0\n", "1\t6\t0\t0\t1\t0.1,0.2\t3.0,4.0\n"]))
    corpus = ingest_logs(p)
    labels = {(r.user_id, r.item_id): r.space for r in corpus.records()}
    assert labels == {(1, 5): SpaceLabel.POSITIVE, (1, 6): SpaceLabel.B}


@pytest.mark.parametrize("line,exc,where", [
    ("1\t5\t1\t1\n", LogParseError, ":2:"),
    ("1\t5\t1\t0\t1\t0.1\t0.2\n", LogParseError, ":2:"),
    ("x\t5\t1\t1\t1\t0.1\t0.2\n", LogParseError, ":2:"),
    ("1\t5\t2\t1\t1\t0.1\t0.2\n", LogParseError, ":2:"),
])
def test_ingest_malformed(tmp_path, line, exc, where):
    p = tmp_path / "bad.log"
    p.write_text(_log_text([line]))
    with pytest.raises(exc, match=where):
        ingest_logs(p)


def test_ingest_bad_header(tmp_path):
    p = tmp_path / "bad.log"
    p.write_text("user\titem\n")
    with pytest.raises(LogParseError, match=":1:"):
        ingest_logs(p)


def test_ingest_inconsistent_features(tmp_path):
    p = tmp_path / "bad.log"
    p.write_text(_log_text(["1\t5\t0\t0\t1\t0.1\t0.2\n", "1\t6\t0\t0\t1\t0.9\t0.2\n"]))
    with pytest.raises(IntegrityError, match="user 1"):
        ingest_logs(p)


def test_ingest_dangling_id_against_reference(tmp_path):
    ref = make_corpus([(0, 1, 1, 1, 1)])
    p = tmp_path / "test.log"
    p.write_text(_log_text(["7\t1\t1\t1\t1\t0.1,0.2\t0.1,0.2\n"]))
    with pytest.raises(IntegrityError, match="user id 7"):
        ingest_logs(p, reference=ref)


def test_partition_invariant(tiny_corpus):
    counts = tiny_corpus.label_counts()
    assert sum(counts.values()) == len(tiny_corpus)
    for rec in tiny_corpus.records():
        assert (rec.y == 1) == (rec.space == SpaceLabel.POSITIVE)
        assert (rec.o == 1) == (rec.space != SpaceLabel.C)


def _first_positive(corpus, with_a=True):
    for rec in corpus.records():
        if rec.y == 1:
            u = corpus.user_index(rec.user_id)
            if not with_a or len(corpus.pools[SpaceLabel.A][u]) >= 1:
                if len(corpus.pools[SpaceLabel.B][u]) >= 4:
                    return rec
    raise AssertionError("no suitable positive")


def test_fixed_ratio_exact(tiny_corpus):
    pos = _first_positive(tiny_corpus)
    counters = SamplerCounters()
    negs = sample_negatives(tiny_corpus, pos, "ss-abc-fixed", rng=np.random.default_rng(0), counters=counters)
    got = [sum(n.space == s for n in negs) for s in (SpaceLabel.A, SpaceLabel.B, SpaceLabel.C)]
    assert got == [1, 4, 20]


def test_ss_a_empty_space_skips():
    corpus = make_corpus([(0, 1, 1, 1, 1), (0, 2, 0, 0, 1)])
    counters = SamplerCounters()
    pos = next(r for r in corpus.records() if r.y == 1)
    assert sample_negatives(corpus, pos, "ss-a", rng=np.random.default_rng(0), counters=counters) == []
    assert counters.skipped_positives == 1


def test_ss_a_fallback_with_replacement():
    corpus = make_corpus([(0, 1, 1, 1, 1), (0, 2, 0, 1, 1), (0, 3, 0, 1, 1)])
    counters = SamplerCounters()
    pos = next(r for r in corpus.records() if r.y == 1)
    negs = sample_negatives(corpus, pos, "ss-a", rng=np.random.default_rng(0), counters=counters)
    assert len(negs) == 25 and {n.item_id for n in negs} <= {2, 3}
    assert counters.fallback_a == 1


def test_random_strategy_avoids_clicked_items():
    corpus = make_corpus([(0, i, 1, 1, 1) for i in (1, 4, 8)], num_items=10)
    pos = next(r for r in corpus.records() if r.y == 1)
    rng = np.random.default_rng(0)
    counts = SamplingCounts(total=5)
    seen = set()
    for _ in range(1000):
        negs = sample_negatives(corpus, pos, "ss-abc-random", counts, rng=rng)
        ids = [n.item_id for n in negs]
        assert len(ids) == len(set(ids)) == 5
        seen.update(ids)
    assert seen == set(range(10)) - {1, 4, 8}


def test_ss_ab_draws_from_a_and_b_only(tiny_corpus):
    pos = _first_positive(tiny_corpus)
    negs = sample_negatives(tiny_corpus, pos, "ss-ab", rng=np.random.default_rng(1))
    assert {n.space for n in negs} <= {SpaceLabel.A, SpaceLabel.B}
    u = tiny_corpus.user_index(pos.user_id)
    recall = set(tiny_corpus.item_ids[tiny_corpus.recall_sets[u]].tolist())
    assert all(n.item_id in recall and n.user_id == pos.user_id for n in negs)


def test_sample_negatives_requires_positive(tiny_corpus):
    rec = next(r for r in tiny_corpus.records() if r.y == 0)
    with pytest.raises(ValueError):
        sample_negatives(tiny_corpus, rec, "ss-a")


def test_single_positive_batch_has_26_entries():
    rows = [(0, 0, 1, 1, 1), (0, 1, 0, 1, 1)] + [(0, i, 0, 0, 1) for i in range(2, 7)]
    corpus = make_corpus(rows, num_users=1, num_items=60)
    batches = list(build_batches(corpus, "ss-abc-fixed", 512, np.random.default_rng(0)))
    assert len(batches) == 1 and len(batches[0]) == 26
    assert np.all(batches[0].ipw_weight == 1.0)


def test_batching_arithmetic():
    rows = []
    for u in range(100):
        rows += [(u, 0, 1, 1, 1), (u, 1, 0, 1, 1)] + [(u, i, 0, 0, 1) for i in range(2, 7)]
    corpus = make_corpus(rows, num_users=100, num_items=60)
    batches = list(build_batches(corpus, "ss-abc-fixed", 52, np.random.default_rng(0)))
    assert len(batches) == 50
    assert all(int((b.space == SpaceLabel.POSITIVE).sum()) == 2 for b in batches)


def test_batch_determinism(tiny_corpus):
    def stream():
        return [(b.user.tobytes(), b.item.tobytes(), b.space.tobytes())
                for b in build_batches(tiny_corpus, "ss-abc-fixed", 64, np.random.default_rng(42))]
    assert stream() == stream()


def test_positive_order_shared_across_strategies(tiny_corpus):
    orders = []
    for strategy in ("ss-ab", "ss-abc-fixed", "ss-abc-random"):
        order = []
        for b in build_batches(tiny_corpus, strategy, 52, np.random.default_rng(7)):
            pos = b.space == SpaceLabel.POSITIVE
            order += list(zip(b.user[pos].tolist(), b.item[pos].tolist()))
        orders.append(order)
    assert orders[0] == orders[1] == orders[2]


def test_zero_positives_is_error():
    corpus = make_corpus([(0, 1, 0, 0, 1)])
    with pytest.raises(ValueError):
        next(build_batches(corpus, "ss-abc-fixed", 8, np.random.default_rng(0)))


def test_fixed_batches_ratio_and_no_positive_overlap(tiny_corpus):
    counters = SamplerCounters()
    clicked = tiny_corpus.clicked_items_by_user()
    for b in build_batches(tiny_corpus, "ss-abc-fixed", 130, np.random.default_rng(3), counters=counters):
        for g in np.unique(b.group):
            sel = b.group == g
            uid = int(tiny_corpus.user_ids[b.user[sel][0]])
            negs = sel & (b.space != SpaceLabel.POSITIVE)
            assert not set(tiny_corpus.item_ids[b.item[negs]].tolist()) & clicked.get(uid, set())
    assert counters.skipped_positives == 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 9), st.integers(0, 3)), min_size=1, max_size=30,
                unique_by=lambda t: (t[0], t[1])))
def test_partition_property(rows):
    # stage: 0 = C, 1 = B, 2 = A, 3 = clicked
    flags = [(u, i, int(s >= 3), int(s >= 2), int(s >= 1)) for u, i, s in rows]
    corpus = make_corpus(flags, num_users=5, num_items=10)
    counts = corpus.label_counts()
    assert sum(counts.values()) == len(rows)
    for rec in corpus.records():
        s = dict(((u, i), s) for u, i, s in rows)[(rec.user_id, rec.item_id)]
        assert rec.space == {3: SpaceLabel.POSITIVE, 2: SpaceLabel.A, 1: SpaceLabel.B, 0: SpaceLabel.C}[s]
