import json
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoflux.errors import DuplicateArtifact, EmptyPool, GateFailed, NotSpeculative, RangeError
from evoflux.pool import (
    Artifact,
    ArtifactPool,
    ConfirmOutcome,
    EntryStatus,
    UpdateOp,
)


def art(aid: str, parent=None) -> Artifact:
    return Artifact(artifact_id=aid, payload={"x": aid}, parent_id=parent)


def test_first_insert_sets_version_and_best():
    pool = ArtifactPool()
    assert pool.version == 0 and pool.best_score == 0.0
    v = pool.insert_confirmed(art("a0"), 0.5)
    assert v == 1
    assert pool.version == 1
    assert pool.best_score == 0.5


def test_non_improving_insert_keeps_best():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.5)
    pool.insert_confirmed(art("a1"), 0.1)
    pool.insert_confirmed(art("a2"), 0.3)
    assert pool.version == 3
    v = pool.insert_confirmed(art("a4"), 0.2)
    assert v == 4
    assert pool.best_score == 0.5


def test_duplicate_insert_rejected():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.5)
    with pytest.raises(DuplicateArtifact):
        pool.insert_confirmed(art("a0"), 0.9)


def test_speculative_insert_requires_strict_improvement():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.5)
    v = pool.insert_speculative(art("s1"), 0.6)
    assert v == 2
    entry = pool.get("s1")
    assert entry.status is EntryStatus.SPECULATIVE
    assert pool.best_score == 0.5  # speculative scores never move best

    with pytest.raises(GateFailed):
        pool.insert_speculative(art("s2"), 0.5)  # boundary: strict inequality


def test_speculative_insert_into_empty_pool():
    pool = ArtifactPool()
    pool.insert_speculative(art("s0"), 0.1)
    assert pool.get("s0").status is EntryStatus.SPECULATIVE
    assert pool.best_score == 0.0


def test_confirm_passing_updates_score():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.5)
    pool.insert_speculative(art("s1"), 0.6)
    outcome, v = pool.confirm_speculative("s1", 0.62)
    assert outcome is ConfirmOutcome.CONFIRMED
    assert v == 3
    assert pool.get("s1").status is EntryStatus.CONFIRMED
    assert pool.get("s1").score == 0.62
    assert pool.best_score == 0.62


def test_confirm_failing_rolls_back_and_removes():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.5)
    pool.insert_speculative(art("s1"), 0.6)
    outcome, v = pool.confirm_speculative("s1", 0.45)
    assert outcome is ConfirmOutcome.ROLLED_BACK
    assert v == 3
    assert pool.get("s1") is None
    assert pool.updates_between(0, pool.version)[-1].op is UpdateOp.ROLLBACK
    assert pool.best_score == 0.5


def test_confirm_on_confirmed_entry_raises():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.5)
    with pytest.raises(NotSpeculative):
        pool.confirm_speculative("a0", 0.9)
    with pytest.raises(NotSpeculative):
        pool.confirm_speculative("missing", 0.9)


def test_insert_if_improves_filters():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.5)
    assert pool.insert_if_improves(art("a1"), 0.5) is None
    assert pool.version == 1
    assert pool.insert_if_improves(art("a1"), 0.7) == 2
    assert pool.best_score == 0.7


def test_updates_between_zero_gap_and_full_history():
    pool = ArtifactPool()
    for i in range(5):
        pool.insert_confirmed(art(f"a{i}"), 0.1 * i)
    assert pool.updates_between(3, 3) == []
    assert [u.version for u in pool.updates_between(0, pool.version)] == [1, 2, 3, 4, 5]


def test_updates_between_half_open_range():
    # Derived by construction: 5 updates; (2, 4] must be versions 3 and 4.
    pool = ArtifactPool()
    expected = {}
    for i in range(5):
        v = pool.insert_confirmed(art(f"a{i}"), 0.1)
        expected[v] = f"a{i}"
    got = pool.updates_between(2, 4)
    assert [u.version for u in got] == [3, 4]
    assert [u.artifact_id for u in got] == [expected[3], expected[4]]


def test_updates_between_range_errors():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.5)
    for bad in [(-1, 0), (0, 2), (1, 0)]:
        with pytest.raises(RangeError):
            pool.updates_between(*bad)


def test_select_single_entry():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.5)
    assert pool.select_candidate().artifact_id == "a0"


def test_select_argmax():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a"), 0.5)
    pool.insert_confirmed(art("b"), 0.7)
    assert pool.select_candidate().artifact_id == "b"


def test_select_tie_breaks_to_earliest_insertion():
    # Derived: equal scores, a inserted at v1, b at v2 -> a wins.
    pool = ArtifactPool()
    pool.insert_confirmed(art("a"), 0.7)
    pool.insert_confirmed(art("b"), 0.7)
    assert pool.get("a").inserted_at_version == 1
    assert pool.get("b").inserted_at_version == 2
    assert pool.select_candidate().artifact_id == "a"


def test_select_excludes_speculative_by_default():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a"), 0.5)
    pool.insert_speculative(art("s"), 0.9)
    assert pool.select_candidate().artifact_id == "a"

    selectable = ArtifactPool(speculative_selectable=True)
    selectable.insert_confirmed(art("a"), 0.5)
    selectable.insert_speculative(art("s"), 0.9)
    assert selectable.select_candidate().artifact_id == "s"


def test_select_empty_pool_raises():
    pool = ArtifactPool()
    with pytest.raises(EmptyPool):
        pool.select_candidate()
    pool.insert_speculative(art("s"), 0.1)
    with pytest.raises(EmptyPool):
        pool.select_candidate()  # speculative-only pool, default selector


@given(
    st.lists(
        st.tuples(st.sampled_from(["confirmed", "spec", "confirm"]), st.floats(0, 1)),
        max_size=40,
    )
)
@settings(max_examples=200, deadline=None)
def test_version_density_over_random_op_sequences(ops):
    """After N committed operations, version == N and log versions are 1..N."""
    pool = ArtifactPool()
    committed = 0
    speculative: list[str] = []
    for i, (kind, score) in enumerate(ops):
        aid = f"x{i}"
        if kind == "confirmed":
            pool.insert_confirmed(art(aid), score)
            committed += 1
        elif kind == "spec":
            try:
                pool.insert_speculative(art(aid), score)
            except GateFailed:
                continue
            committed += 1
            speculative.append(aid)
        elif speculative:
            pool.confirm_speculative(speculative.pop(0), score)
            committed += 1
    assert pool.version == committed
    assert [u.version for u in pool.updates_between(0, pool.version)] == list(
        range(1, committed + 1)
    )


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_best_score_non_decreasing_under_confirmed_path(scores):
    pool = ArtifactPool()
    best_seen = 0.0
    for i, score in enumerate(scores):
        pool.insert_confirmed(art(f"a{i}"), score)
        assert pool.best_score >= best_seen
        best_seen = pool.best_score


def test_rollback_never_lowers_best():
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.4)
    pool.insert_speculative(art("s"), 0.9)
    before = pool.best_score
    pool.confirm_speculative("s", 0.1)
    assert pool.best_score == before


def test_concurrent_commits_keep_dense_total_order():
    pool = ArtifactPool()
    n_threads, per_thread = 8, 50

    def hammer(t: int) -> None:
        for i in range(per_thread):
            pool.insert_confirmed(art(f"t{t}-{i}"), 0.5)

    threads = [threading.Thread(target=hammer, args=(t,)) for t in range(n_threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    total = n_threads * per_thread
    assert pool.version == total
    log = pool.updates_between(0, total)
    assert [u.version for u in log] == list(range(1, total + 1))
    # updates_between partitions the log at any split point
    mid = total // 3
    assert pool.updates_between(0, mid) + pool.updates_between(mid, total) == log


def test_checkpoint_roundtrip(tmp_path):
    pool = ArtifactPool()
    pool.insert_confirmed(art("a0"), 0.5)
    pool.insert_speculative(art("s1"), 0.7)
    pool.insert_confirmed(art("a2", parent="a0"), 0.6)
    path = tmp_path / "pool.json"
    pool.save(str(path))

    data = json.loads(path.read_text())
    assert set(data) == {"version", "entries", "log"}
    assert data["version"] == 3

    loaded = ArtifactPool.load(str(path))
    assert loaded.version == 3
    assert loaded.best_score == 0.6
    assert loaded.get("s1").status is EntryStatus.SPECULATIVE
    assert loaded.get("a2").artifact.parent_id == "a0"
