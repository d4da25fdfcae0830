import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoflux.errors import ConfigError
from evoflux.pool import Artifact, ArtifactPool
from evoflux.speculation import (
    FanoutTracker,
    PartialScore,
    SpecGate,
    release_threshold,
    speculative_eval_gate,
)


def test_release_after_one_completion_for_quarter_alpha():
    assert release_threshold(0.25, 4) == 1


def test_minibatch_of_three_with_quarter_alpha():
    # ceil(0.25 * 3) = ceil(0.75) = 1
    assert release_threshold(0.25, 3) == 1


def test_alpha_one_threshold_is_full_fanout():
    assert release_threshold(1.0, 7) == 7


def test_threshold_matches_exact_ceiling_for_awkward_floats():
    # 0.3 * 10 read as a float product would ceil to 4; the rational reading is 3.
    assert release_threshold(0.3, 10) == 3
    assert release_threshold(0.1, 3) == 1
    assert release_threshold(2 / 3, 6) == 4


def test_release_threshold_validates_inputs():
    with pytest.raises(ConfigError):
        release_threshold(0.0, 4)
    with pytest.raises(ConfigError):
        release_threshold(1.1, 4)
    with pytest.raises(ConfigError):
        release_threshold(0.5, 0)


@given(st.floats(0.01, 1.0), st.integers(1, 100))
@settings(max_examples=300, deadline=None)
def test_threshold_bounds(alpha, fan_out):
    t = release_threshold(alpha, fan_out)
    assert 1 <= t <= fan_out


@given(st.integers(1, 50), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
@settings(max_examples=300, deadline=None)
def test_threshold_monotone_in_alpha(fan_out, a, b):
    lo, hi = sorted((a, b))
    assert release_threshold(lo, fan_out) <= release_threshold(hi, fan_out)


def test_partial_score_ratio():
    assert PartialScore(3, 4).score == 0.75
    assert PartialScore(0, 0).score == 0.0


def test_eval_gate_strict_improvement():
    pool = ArtifactPool()
    pool.insert_confirmed(Artifact("a0", {}), 0.5)
    assert speculative_eval_gate(PartialScore(3, 4), pool) is SpecGate.INSERT  # 0.75 > 0.5
    assert speculative_eval_gate(PartialScore(2, 4), pool) is SpecGate.HOLD  # boundary

    empty = ArtifactPool()
    assert speculative_eval_gate(PartialScore(0, 1), empty) is SpecGate.HOLD  # 0 > 0 fails


def test_tracker_releases_once_then_completes():
    tracker = FanoutTracker("i1", fan_out=4, alpha_spec=0.25)
    assert tracker.record("r1") == "release"
    assert tracker.record("r2") is None
    assert tracker.record("r3") is None
    assert tracker.record("r4") == "complete"
    assert tracker.partial_results() == ["r1"]
    assert tracker.remaining_results() == ["r2", "r3", "r4"]
    info = tracker.release_info()
    assert info.released_fraction == 0.25
    assert info.remaining == 3
    with pytest.raises(RuntimeError):
        tracker.record("r5")


def test_tracker_alpha_one_never_releases():
    tracker = FanoutTracker("i1", fan_out=3, alpha_spec=1.0)
    assert tracker.record("a") is None
    assert tracker.record("b") is None
    assert tracker.record("c") == "complete"
    assert not tracker.released
    assert tracker.remaining_results() == ["a", "b", "c"]


def test_tracker_threshold_equal_to_fanout_behaves_like_disabled():
    # alpha 0.9 on fan_out 2: ceil(1.8) = 2 = fan_out; only a completion happens.
    tracker = FanoutTracker("i1", fan_out=2, alpha_spec=0.9)
    assert tracker.record("a") is None
    assert tracker.record("b") == "complete"
    assert not tracker.released


@given(
    st.integers(1, 20),
    st.sampled_from([0.25, 0.5, 1.0]),
)
@settings(max_examples=300, deadline=None)
def test_tracker_exactly_once_release_and_complete(fan_out, alpha):
    tracker = FanoutTracker("i", fan_out=fan_out, alpha_spec=alpha)
    events = [tracker.record(k) for k in range(fan_out)]
    assert events.count("complete") == 1
    assert events[-1] == "complete"
    releases = events.count("release")
    threshold = release_threshold(alpha, fan_out)
    if alpha < 1.0 and threshold < fan_out:
        assert releases == 1
        assert events[threshold - 1] == "release"
    else:
        assert releases == 0
    assert tracker.release_count == threshold == math.ceil(alpha * fan_out - 1e-9)
