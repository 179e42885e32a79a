import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import (
    MARGIN,
    central_diff,
    l1_margin,
    random_polyline,
    random_ring,
    rel_error,
    segment_gap,
)
from instances import occluded_boundary_fixture
from pseudomap.assign import CostParams, solve_global
from pseudomap.geometry import BevSpec, MapClass, MapElement, equivalent_orderings
from pseudomap.losses import (
    LossParams,
    class_vector,
    compute_losses,
    dice_loss,
    direction_loss,
    focal_loss,
    masked_bev_seg_loss,
    pointwise_l1,
    render_loss,
    soft_rasterize,
    total_loss,
)
from pseudomap.raster import BevMask

SPEC = BevSpec(-4, 4, -4, 4, 4)


# --- focal ---------------------------------------------------------------

def test_focal_values():
    assert focal_loss([0, 1, 0, 0], 1)[0] == 0.0
    assert focal_loss([0.5, 0.5, 0, 0], 0)[0] == pytest.approx(0.25 * 0.25 * math.log(2), rel=1e-12)
    v, g = focal_loss([1, 0, 0, 0], 1)
    assert v == pytest.approx(-0.25 * (1 - 1e-7) ** 2 * math.log(1e-7))
    assert np.isfinite(v) and not g.any()


def test_focal_gradient():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.dirichlet(np.ones(4))
        cls = int(rng.integers(0, 4))
        p[cls] = max(p[cls], 0.01)
        _, g = focal_loss(p, cls)
        num = central_diff(lambda x: focal_loss(x, cls)[0], p)
        assert rel_error(g, num) <= 1e-4


# --- point-wise L1 -------------------------------------------------------

def test_l1_identity_and_reversal():
    q = np.random.default_rng(1).normal(size=(20, 2))
    assert pointwise_l1(q, q)[0] == 0.0
    g = q + 0.3
    assert pointwise_l1(q, g[::-1])[0] == pointwise_l1(q, g)[0]


def test_l1_brute_force_orderings():
    rng = np.random.default_rng(2)
    for closed in (False, True):
        for _ in range(10):
            q, g = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
            if closed:
                cands = []
                for seq in (g, g[::-1]):
                    for k in range(20):
                        cands.append(np.concatenate([seq[k:], seq[:k]]))
            else:
                cands = [g, g[::-1]]
            expected = min(sum(abs(a - b) for a, b in zip(q.ravel(), c.ravel())) for c in cands)
            assert pointwise_l1(q, g, closed)[0] == pytest.approx(expected, rel=1e-12)


@given(st.integers(0, 2 ** 31), st.floats(-50, 50), st.floats(-50, 50), st.booleans())
def test_l1_invariances(seed, tx, ty, closed):
    rng = np.random.default_rng(seed)
    q, g = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    v = pointwise_l1(q, g, closed)[0]
    for o in equivalent_orderings(g, closed):
        assert pointwise_l1(q, o, closed)[0] == v
    t = np.array([tx, ty])
    assert pointwise_l1(q + t, g + t, closed)[0] == pytest.approx(v, rel=1e-9, abs=1e-9)


def test_l1_gradient():
    rng = np.random.default_rng(3)
    done = 0
    while done < 20:
        closed = bool(rng.integers(0, 2))
        q, g = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        if l1_margin(q, g, closed) < MARGIN:
            continue
        done += 1
        _, grad, _ = pointwise_l1(q, g, closed)
        num = central_diff(lambda x: pointwise_l1(x, g, closed)[0], q)
        assert rel_error(grad, num) <= 1e-4


# --- soft raster ---------------------------------------------------------

def test_soft_raster_values():
    spec = BevSpec(-1, 1, -1, 1, 2)  # centres at +-0.25, +-0.75
    r, _ = soft_rasterize([[-0.25, -2], [-0.25, 2]], spec, sigma=0.3)
    assert r.values[0, 1] == 1.0
    r, _ = soft_rasterize([[0.25 - 0.9, -2], [0.25 - 0.9, 2]], spec, sigma=0.3)
    assert r.values[0, 2] == pytest.approx(math.exp(-4.5), rel=1e-9)


def _raster_gradcheck(rng, closed):
    while True:
        p = random_ring(rng) if closed else random_polyline(rng)
        if segment_gap(p, SPEC, closed).min() >= MARGIN:
            break
    up = rng.random(SPEC.shape)
    r, jac = soft_rasterize(p, SPEC, 0.5, closed=closed)
    num = central_diff(lambda x: float((soft_rasterize(x, SPEC, 0.5, closed=closed)[0].values
                                        * up).sum()), p)
    return rel_error(jac.vjp(up), num)


@pytest.mark.parametrize("closed", [False, True])
def test_soft_raster_gradient(closed):
    rng = np.random.default_rng(4)
    for _ in range(5):
        assert _raster_gradcheck(rng, closed) <= 1e-4


# --- dice ----------------------------------------------------------------

def test_dice_identical_and_disjoint():
    a = np.zeros((50, 50))
    a[:, :25] = 1.0
    assert dice_loss(a, a)[0] <= 1e-3
    assert dice_loss(a, 1 - a)[0] == pytest.approx(1.0, abs=1e-3)


def test_dice_masked_equals_cropped():
    rng = np.random.default_rng(5)
    p, t = rng.random((30, 30)), rng.random((30, 30))
    m = np.zeros((30, 30), bool)
    m[5:20, 8:25] = True
    p2 = p.copy()
    p2[~m] = rng.random((~m).sum())  # disagreement confined to masked-out cells
    assert dice_loss(p2, t, m)[0] == dice_loss(p[5:20, 8:25], t[5:20, 8:25])[0]


@given(st.integers(0, 2 ** 31))
def test_dice_range(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random((8, 8)), rng.random((8, 8))
    m = rng.random((8, 8)) < 0.5
    assert 0.0 <= dice_loss(p, t, m)[0] <= 1.0


def test_dice_gradient():
    rng = np.random.default_rng(6)
    for _ in range(10):
        p, t = rng.random((6, 6)), rng.random((6, 6))
        m = rng.random((6, 6)) < 0.7
        _, g = dice_loss(p, t, m)
        num = central_diff(lambda x: dice_loss(x, t, m)[0], p)
        assert rel_error(g, num) <= 1e-4


# --- render loss ---------------------------------------------------------

def test_render_loss_identity_and_fragments():
    mask = BevMask.full(SPEC)
    q = np.column_stack([np.zeros(10), np.linspace(-3, 3, 10)])
    assert render_loss(q, [(q, False)], mask)[0] == pytest.approx(0.0, abs=1e-3)
    occl = BevMask(np.abs(SPEC.pixel_centers()[1]) > 0.6, SPEC)
    lo = (np.array([[0, -3], [0, -0.6]], float), False)
    hi = (np.array([[0, 0.6], [0, 3]], float), False)
    both = render_loss(q, [lo, hi], occl)[0]
    assert both < render_loss(q, [lo], occl)[0] and both < render_loss(q, [hi], occl)[0]


def test_render_loss_gradient():
    rng = np.random.default_rng(7)
    done = 0
    while done < 5:
        q = random_polyline(rng, spread=2.5)
        if segment_gap(q, SPEC).min() < MARGIN:
            continue
        done += 1
        g = [(random_polyline(rng, spread=2.5), False)]
        mask = BevMask(rng.random(SPEC.shape) < 0.8, SPEC)
        _, grad = render_loss(q, g, mask, sigma=0.5)
        num = central_diff(lambda x: render_loss(x, g, mask, sigma=0.5)[0], q)
        assert rel_error(grad, num) <= 1e-4


# --- direction -----------------------------------------------------------

def test_direction_values():
    assert direction_loss([[0, 0], [1, 1], [2, 2], [3, 3]])[0] == pytest.approx(0.0, abs=1e-15)
    assert direction_loss([[0, 0], [1, 0], [1, 1]])[0] == pytest.approx(1.0)


@given(st.integers(0, 2 ** 31), st.floats(-3.1, 3.1), st.booleans())
def test_direction_rotation_invariant(seed, a, closed):
    rng = np.random.default_rng(seed)
    p = random_ring(rng) if closed else random_polyline(rng, n=5)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    assert direction_loss(p @ R.T, closed)[0] == pytest.approx(direction_loss(p, closed)[0],
                                                              abs=1e-12)


def test_direction_gradient():
    rng = np.random.default_rng(8)
    for closed in (False, True):
        for _ in range(10):
            p = random_ring(rng) if closed else random_polyline(rng, n=5)
            _, g = direction_loss(p, closed)
            num = central_diff(lambda x: direction_loss(x, closed)[0], p)
            assert rel_error(g, num) <= 1e-4


# --- BEV segmentation ----------------------------------------------------

def test_bev_seg_values():
    y = (np.random.default_rng(9).random((10, 10)) < 0.5).astype(float)
    assert masked_bev_seg_loss(y, y) <= 1e-6
    assert masked_bev_seg_loss(np.full((10, 10), 0.3), y, np.zeros((10, 10), bool)) == 0.0


def test_bev_seg_masked_equals_subgrid():
    rng = np.random.default_rng(10)
    for _ in range(5):
        p, y = rng.random((20, 20)), (rng.random((20, 20)) < 0.4).astype(float)
        m = np.zeros((20, 20), bool)
        m[3:15, 2:11] = True
        assert masked_bev_seg_loss(p, y, m) == pytest.approx(
            masked_bev_seg_loss(p[3:15, 2:11], y[3:15, 2:11]), rel=1e-12)


# --- aggregation ---------------------------------------------------------

def _parts(rng):
    gp = [rng.normal(size=(5, 2)) for _ in range(2)]
    return {"cls": (0.7, None, rng.normal(size=(2, 4))), "pt": (1.3, gp, None),
            "rend": (0.4, [g * 2 for g in gp], None), "dir": (0.1, gp, None),
            "bev_seg": (0.9, None, None)}


def test_total_loss_weights():
    rng = np.random.default_rng(11)
    parts = _parts(rng)
    zero = total_loss(parts, {k: 0.0 for k in parts}, [5, 5])
    assert zero.total == 0.0 and not any(g.any() for g in zero.grad_points)
    assert not zero.grad_class.any()
    one = total_loss(parts, {"pt": 3.0}, [5, 5])
    assert one.total == 3.0 * 1.3
    w = {"cls": 2.0, "pt": 5.0, "rend": 1.0, "dir": 1.0, "bev_seg": 1.0}
    a = total_loss(parts, w, [5, 5])
    b = total_loss(parts, {k: 2 * v for k, v in w.items()}, [5, 5])
    assert b.total == 2 * a.total
    for ga, gb in zip(a.grad_points, b.grad_points):
        np.testing.assert_array_equal(gb, 2 * ga)
    np.testing.assert_array_equal(b.grad_class, 2 * a.grad_class)
    assert a.total == sum(w[k] * parts[k][0] for k in ("cls", "pt", "rend", "dir", "bev_seg"))


def test_loss_params_validation():
    with pytest.raises(ValueError):
        LossParams(weights=(("cls", -1.0),))
    with pytest.raises(ValueError):
        LossParams(direction="nope")


def test_class_vector_distribution():
    p = class_vector(MapClass.DIVIDER, 0.7)
    assert p[MapClass.DIVIDER] == 0.7 and p.sum() == pytest.approx(1.0)


def test_compute_losses_o2m_has_no_point_term():
    Q, G, mask = occluded_boundary_fixture()
    res = solve_global(Q[:1], G, mask)
    assert res.outcomes[0].kind == "o2m"
    out = compute_losses(Q[:1], G, mask, res)
    assert out.pt == 0.0
    assert out.rend > 0.0


def test_compute_losses_gradient_of_total():
    Q, G, mask = occluded_boundary_fixture()
    Q = [q.with_points(q.points[::8]) for q in Q]
    res = solve_global(Q, G, mask, CostParams())
    params = LossParams(weights=(("cls", 0.0), ("pt", 5.0), ("rend", 1.0), ("dir", 1.0),
                                 ("bev_seg", 0.0)), render_resolution=2.0)
    out = compute_losses(Q, G, mask, res, params)
    i = 1  # the duplicate is unassigned: only the direction term reaches it
    def f(x):
        Qx = list(Q)
        Qx[i] = Q[i].with_points(x)
        return compute_losses(Qx, G, mask, res, params).total
    num = central_diff(f, Q[i].points)
    assert rel_error(out.grad_points[i], num) <= 1e-4
