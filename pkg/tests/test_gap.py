import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predcode import _backend, _pykernels
from predcode.gap import CausalNeighbors, causal_neighbors, gap_predict, gap_predict_planes, predict_pixel

byte = st.integers(0, 255)


def test_flat_neighbors():
    assert gap_predict(CausalNeighbors(*[77] * 7)) == 77


def test_hand_evaluated_case():
    assert gap_predict(CausalNeighbors(W=100, N=50, NW=50, NE=50, WW=50, NN=50, NNE=50)) == 75


def test_sharp_vertical_edge_returns_w():
    # dv exceeds dh by more than 80
    n = CausalNeighbors(W=10, N=200, NW=10, NE=200, WW=10, NN=10, NNE=10)
    assert (abs(n.W - n.NW) + abs(n.N - n.NN) + abs(n.NE - n.NNE)) - (abs(n.W - n.WW) + abs(n.N - n.NW) + abs(n.N - n.NE)) > 80
    assert gap_predict(n) == 10


def test_sharp_horizontal_edge_returns_n():
    n = CausalNeighbors(W=10, N=50, NW=200, NE=200, WW=200, NN=50, NNE=200)
    assert gap_predict(n) == 50


@settings(max_examples=500, deadline=None)
@given(st.tuples(*[byte] * 7))
def test_output_range(v):
    n = CausalNeighbors(*v)
    p = gap_predict(n)
    assert min(n.W, n.N) - 64 <= p <= max(n.W, n.N) + 64


def _ref_neighbors(img, x, y):
    """Border substitution written out case by case."""
    h, w = len(img), len(img[0])

    def get(xx, yy):
        return int(img[yy][xx])

    if y == 0:
        W = get(x - 1, 0)
        WW = get(x - 2, 0) if x >= 2 else W
        return CausalNeighbors(W, W, W, W, WW, W, W)
    N = get(x, y - 1)
    W = get(x - 1, y) if x >= 1 else N
    NW = get(x - 1, y - 1) if x >= 1 else N
    WW = get(x - 2, y) if x >= 2 else W
    NE = get(x + 1, y - 1) if x + 1 < w else N
    NN = get(x, y - 2) if y >= 2 else N
    NNE = get(x + 1, y - 2) if (y >= 2 and x + 1 < w) else NE
    return CausalNeighbors(W, N, NW, NE, WW, NN, NNE)


def test_border_rules_match_reference(rng):
    img = rng.integers(0, 256, (5, 6), dtype=np.uint8)
    for y in range(5):
        for x in range(6):
            if x == 0 and y == 0:
                assert predict_pixel(img, 0, 0) == 128
                continue
            assert causal_neighbors(img, x, y) == _ref_neighbors(img, x, y)


@pytest.mark.parametrize("shape", [(1, 1), (1, 7), (7, 1), (2, 2), (13, 17)])
def test_planes_match_scalar(rng, shape):
    img = rng.integers(0, 256, shape, dtype=np.uint8)
    planes = gap_predict_planes(img)
    fast = _backend.gap_predict_image(img)
    for y in range(shape[0]):
        for x in range(shape[1]):
            assert planes[y, x] == predict_pixel(img, x, y) == fast[y, x]


def test_constant_image_predictions():
    img = np.full((10, 10), 93, np.uint8)
    p = gap_predict_planes(img)
    assert (p.ravel()[1:] == 93).all() and p[0, 0] == 128


def test_reconstruct_backends_agree(rng):
    img = rng.integers(0, 256, (20, 30), dtype=np.uint8)
    pred = np.clip(np.floor(gap_predict_planes(img) + 0.5), 0, 255).astype(np.int32)
    res = img.astype(np.int32) - pred
    np.testing.assert_array_equal(_pykernels.gap_reconstruct(res), img)
    np.testing.assert_array_equal(_backend.gap_reconstruct(res), img)


def test_reconstruct_out_of_range():
    with pytest.raises(ValueError):
        _backend.gap_reconstruct(np.full((2, 2), 200, np.int32))
