import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rnnt_brute_force
from vcam_asr import numcore as nc
from vcam_asr.numcore.gradcheck import max_rel_error
from vcam_asr.transducer import (MAX_SYMBOLS_PER_FRAME, greedy_decode_lattice, greedy_search,
                                 multichannel_loss, rnnt_loss, rnnt_loss_batch)


def random_lattice(rng, t, u, v):
    x = rng.normal(size=(t, u + 1, v)) * 2
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


def loss64(lp, y):
    with nc.precision(64):
        return float(rnnt_loss(nc.constant(lp), y).item())


def test_single_path():
    lp = np.log(np.array([[[0.3, 0.7]]]))
    assert loss64(lp, []) == pytest.approx(-math.log(0.3))


def test_two_frames_one_label_hand_enumeration():
    rng = np.random.default_rng(0)
    lp = random_lattice(rng, 2, 1, 3)
    p = np.exp(lp)
    y = 2
    # frames are 1-based in the formula; arrays 0-based
    expect = -math.log(p[0, 0, y] * p[0, 1, 0] * p[1, 1, 0] + p[0, 0, 0] * p[1, 0, y] * p[1, 1, 0])
    assert loss64(lp, [y]) == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("t,u", [(t, u) for t in range(1, 5) for u in range(0, 4)])
def test_uniform_lattice_path_count(t, u):
    v = 4
    lp = np.full((t, u + 1, v), -math.log(v))
    n_paths = math.comb(t + u - 1, u)
    expect = -math.log(n_paths * (1 / v) ** (t + u))
    y = [1 + (i % 3) for i in range(u)]
    assert loss64(lp, y) == pytest.approx(expect, rel=1e-12)
    assert rnnt_brute_force(lp, y) == pytest.approx(expect, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_matches_enumeration(t, u, v, seed):
    rng = np.random.default_rng(seed)
    lp = random_lattice(rng, t, u, v)
    y = list(rng.integers(1, v, u))
    oracle = rnnt_brute_force(lp, y)
    assert loss64(lp, y) == pytest.approx(oracle, rel=1e-9)
    assert loss64(lp, y) >= 0


def test_zero_loss_only_for_certain_alignment():
    lp = np.full((2, 2, 3), -50.0)
    lp[0, 0, 1] = 0.0      # emit label at frame 1
    lp[0, 1, 0] = 0.0      # then blank
    lp[1, 1, 0] = 0.0
    assert loss64(lp, [1]) == pytest.approx(0.0, abs=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    with nc.precision(64):
        x = nc.Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
        err = max_rel_error(lambda: rnnt_loss(nc.log_softmax(x), [1, 3]), [x])
        lat = nc.Tensor(random_lattice(rng, 4, 2, 3), requires_grad=True)
        err2 = max_rel_error(lambda: rnnt_loss(lat, [2, 2]), [lat])
    assert err < 1e-4 and err2 < 1e-4


def test_padded_batch_equals_individual_losses():
    rng = np.random.default_rng(2)
    lats = [random_lattice(rng, t, u, 5) for t, u in ((4, 2), (2, 3), (3, 0))]
    ys = [[1, 2], [4, 4, 1], []]
    big = np.full((3, 4, 4, 5), -math.log(5))
    targets = np.zeros((3, 3), dtype=np.int64)
    for i, (lp, y) in enumerate(zip(lats, ys)):
        big[i, : lp.shape[0], : lp.shape[1]] = lp
        targets[i, : len(y)] = y
    with nc.precision(64):
        out = rnnt_loss_batch(nc.constant(big), targets, [4, 2, 3], [2, 3, 0]).data
    np.testing.assert_allclose(out, [loss64(lp, y) for lp, y in zip(lats, ys)], rtol=1e-12)


def test_lattice_label_mismatch():
    with pytest.raises(ValueError):
        rnnt_loss(np.zeros((2, 2, 3)), [1, 2])


def test_multichannel_sum_rules():
    rng = np.random.default_rng(3)
    a, b = random_lattice(rng, 3, 2, 4), random_lattice(rng, 3, 1, 4)
    with nc.precision(64):
        single = rnnt_loss(nc.constant(a), [1, 2]).item()
        assert multichannel_loss([a, a], [[1, 2], [1, 2]]).item() == pytest.approx(2 * single, rel=1e-14)
        assert multichannel_loss([a], [[1, 2]]).item() == pytest.approx(single, rel=1e-14)
        ab = multichannel_loss([a, b], [[1, 2], [3]]).item()
        ba = multichannel_loss([b, a], [[3], [1, 2]]).item()
    assert ab == pytest.approx(ba, rel=1e-14)
    with pytest.raises(ValueError):
        multichannel_loss([a, b], [[1, 2]])


def test_greedy_all_blank():
    lat = np.full((5, 1, 4), -10.0)
    lat[..., 0] = 0.0
    h = greedy_decode_lattice(lat, track=1)
    assert h.tokens == [] and h.frame_emissions == [] and h.track == 1


def test_greedy_hand_walk():
    lat = np.full((2, 2, 4), -10.0)
    lat[0, 0, 3] = 0.0       # frame 1, nothing emitted yet: token 3
    lat[0, 1, 0] = 0.0       # then blank
    lat[1, 1, 0] = 0.0
    h = greedy_decode_lattice(lat)
    assert h.tokens == [3] and h.frame_emissions == [1]


def test_greedy_caps_emissions_per_frame():
    lat = np.full((2, 1, 3), -10.0)
    lat[..., 2] = 0.0        # never blank
    h = greedy_search(2, lambda t, pre: lat[t, 0])
    assert len(h.tokens) == 2 * MAX_SYMBOLS_PER_FRAME
    assert h.frame_emissions == sorted(h.frame_emissions)


def test_greedy_tracks_are_recorded():
    lat = np.zeros((3, 1, 3))
    assert [greedy_decode_lattice(lat, track=m).track for m in (0, 1)] == [0, 1]
