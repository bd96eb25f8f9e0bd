import itertools
import math

import numpy as np
import pytest

from aro_lab import diffgraph as dg
from aro_lab.ctc import brute_force_ctc, ctc_loss, greedy_decode, min_frames
from aro_lab.exceptions import InfeasibleTargetError, InstanceTooLargeError


def _normalized(rng, T, cols):
    x = rng.normal(size=(T, cols))
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def _uniform(T, cols):
    return np.full((T, cols), -math.log(cols))


def _enumerated(lattice, target):
    """Independent enumeration of -log P, written without the package's collapse helper."""
    T, cols = lattice.shape
    blank = cols - 1
    total = 0.0
    for path in itertools.product(range(cols), repeat=T):
        out = [k for i, k in enumerate(path) if k != blank and (i == 0 or path[i - 1] != k)]
        if out == list(target):
            total += math.exp(sum(lattice[t, k] for t, k in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def test_uniform_single_symbol_closed_form():
    lat = _uniform(3, 3)
    assert ctc_loss(lat, [0]).item() == pytest.approx(math.log(4.5), abs=1e-12)
    assert _enumerated(lat, [0]) == pytest.approx(math.log(4.5), abs=1e-12)


def test_repeat_needs_blank():
    lat = _uniform(4, 3)
    assert ctc_loss(lat, [0, 0]).item() == pytest.approx(_enumerated(lat, [0, 0]), abs=1e-9)


def test_one_hot_path_has_zero_loss():
    lat = np.full((3, 3), -50.0)
    lat[0, 0] = lat[1, 2] = lat[2, 1] = 0.0
    assert ctc_loss(lat, [0, 1]).item() == pytest.approx(0.0, abs=1e-12)


def test_empty_target_is_all_blank():
    assert brute_force_ctc(_uniform(2, 3), []) == pytest.approx(math.log(9))
    assert ctc_loss(_uniform(2, 3), []).item() == pytest.approx(math.log(9))


def test_infeasible():
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(_uniform(2, 3), [0, 0])
    assert brute_force_ctc(_uniform(2, 3), [0, 0]) == math.inf
    assert min_frames([0, 0, 1, 1, 1]) == 8


def test_brute_force_budget():
    with pytest.raises(InstanceTooLargeError):
        brute_force_ctc(_uniform(11, 4), [0])


def test_brute_force_matches_enumeration():
    rng = np.random.default_rng(0)
    lat = _normalized(rng, 4, 3)
    for target in ([], [0], [1, 0], [0, 0]):
        assert brute_force_ctc(lat, target) == pytest.approx(_enumerated(lat, target), abs=1e-12)


@pytest.mark.parametrize("T", range(1, 7))
@pytest.mark.parametrize("V", range(1, 4))
def test_forward_backward_equals_brute_force(T, V):
    rng = np.random.default_rng(10 * T + V)
    lat = _normalized(rng, T, V + 1)
    for length in range(4):
        for target in itertools.product(range(V), repeat=length):
            bf = brute_force_ctc(lat, target)
            if T < min_frames(target):
                assert bf == math.inf
                continue
            loss = ctc_loss(lat, target).item()
            assert loss >= 0
            assert abs(loss - bf) < 1e-9


@pytest.mark.parametrize("target", [[0], [0, 1, 1], [2, 0, 2, 1]])
def test_gradient_through_log_softmax(target):
    rng = np.random.default_rng(len(target))
    logits = rng.normal(size=(9, 4))
    err = dg.finite_diff_check(lambda n: ctc_loss(dg.log_softmax(n), target), logits)
    assert err < 1e-4


def test_long_lattice_is_stable():
    rng = np.random.default_rng(5)
    lat = _normalized(rng, 400, 28)
    loss = ctc_loss(lat, rng.integers(27, size=60)).item()
    assert np.isfinite(loss) and loss > 0


@pytest.mark.parametrize(
    "path, expected",
    [((0, 0, 2, 1), (0, 1)), ((2, 2, 2), ()), ((0, 2, 0), (0, 0))],
)
def test_greedy_decode(path, expected):
    lat = np.full((len(path), 3), -10.0)
    lat[np.arange(len(path)), path] = 0.0
    assert greedy_decode(lat) == expected


def test_greedy_decode_one_hot_collapse_property():
    rng = np.random.default_rng(9)
    for _ in range(50):
        path = rng.integers(4, size=rng.integers(1, 12))
        lat = np.full((path.size, 4), -5.0)
        lat[np.arange(path.size), path] = 0.0
        expected = [k for i, k in enumerate(path) if k != 3 and (i == 0 or path[i - 1] != k)]
        assert list(greedy_decode(lat)) == expected
