import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrtrack import sfp
from lrtrack import tensor as T
from lrtrack.bev import GridSpec
from lrtrack.config import Config
from lrtrack.gradcheck import grad_check
from lrtrack.model import TrackerModel
from lrtrack.scene import Box3D, generate_sequence
from lrtrack.training import grid_spec, make_sample, train

SPEC = GridSpec.for_class("car", 32, 32)


def small_params(seed=0, C=4):
    return sfp.init_params(np.random.default_rng(seed), C)


def test_constant_network_gives_half(rng):
    params = small_params()
    out = sfp.sfp_forward(T.constant(np.zeros((36, 8))), params, 6, 6)
    assert out.shape == (36, 1)
    assert np.all(out.data == 0.5)


def test_input_shape_checked():
    params = small_params()
    with pytest.raises(T.ShapeError):
        sfp.sfp_forward(T.constant(np.zeros((35, 8))), params, 6, 6)
    with pytest.raises(T.ShapeError):
        sfp.sfp_forward(T.constant(np.zeros((36, 6))), params, 6, 6)
    with pytest.raises(ValueError):
        sfp.init_params(np.random.default_rng(0), 6)


def test_predictor_loss_gradients(rng):
    params = small_params(1)
    for p in params.values():  # nonzero biases so every path is exercised
        p.data += 0.1 * rng.normal(size=p.shape)
    x = T.constant(rng.normal(size=(25, 8)))
    target = rng.uniform(size=(25, 1))
    report = grad_check(lambda: sfp.sfp_loss(sfp.sfp_forward(x, params, 5, 5), target), list(params.values()))
    assert report.passed, str(report)


def test_heatmap_stays_in_unit_interval():
    params = small_params(2)
    for seed in range(100):
        x = np.random.default_rng(seed).normal(scale=5.0, size=(16, 8))
        y = sfp.sfp_forward(T.constant(x), params, 4, 4).data
        assert y.min() >= 0.0 and y.max() <= 1.0


# ------------------------------------------------------------- rendering


def test_peak_is_one_at_a_cell_centre():
    x, y = SPEC.from_cell_coords(12, 20)
    m = sfp.render_gt_heatmap([Box3D(x, y, 0, 1.8, 1.5, 4.2, 0.3)], SPEC)
    assert m[12, 20] == 1.0 and m.max() == 1.0


def test_value_one_sigma_away():
    box = Box3D(*SPEC.from_cell_coords(10, 10), 0, 3.6, 1.5, 4.2, 0.0)
    sigma = sfp.gaussian_sigma(box, SPEC)
    assert sigma == pytest.approx(max(1.0, min(3.6 / SPEC.cell_y, 4.2 / SPEC.cell_x) / 6))
    # place the centre so that cell (10, 10) is exactly sigma away along rows
    shifted = Box3D(*SPEC.from_cell_coords(10 - sigma, 10), 0, 3.6, 1.5, 4.2, 0.0)
    m = sfp.render_gt_heatmap([shifted], SPEC)
    assert m[10, 10] == pytest.approx(math.exp(-0.5), rel=1e-12)


def test_sigma_has_a_one_cell_floor():
    tiny = Box3D(0, 0, 0, 0.1, 1.0, 0.1, 0.0)
    assert sfp.gaussian_sigma(tiny, SPEC) == 1.0


def test_two_boxes_compose_by_max():
    a = Box3D(*SPEC.from_cell_coords(5, 5), 0, 1.8, 1.5, 4.2, 0.0)
    b = Box3D(*SPEC.from_cell_coords(25, 22), 0, 1.8, 1.5, 4.2, 0.0)
    both = sfp.render_gt_heatmap([a, b], SPEC)
    assert np.array_equal(both, np.maximum(sfp.render_gt_heatmap([a], SPEC), sfp.render_gt_heatmap([b], SPEC)))


def test_box_outside_the_grid_contributes_nothing():
    assert not sfp.render_gt_heatmap([Box3D(20.0, 0, 0, 1.8, 1.5, 4.2, 0)], SPEC).any()


@given(st.integers(-6, 6), st.integers(-6, 6), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_rendering_is_translation_equivariant(di, dj, fu, fv):
    u, v = 15 + fu, 15 + fv
    a = sfp.render_gt_heatmap([Box3D(*SPEC.from_cell_coords(u, v), 0, 1.8, 1.5, 4.2, 0)], SPEC)
    b = sfp.render_gt_heatmap([Box3D(*SPEC.from_cell_coords(u + di, v + dj), 0, 1.8, 1.5, 4.2, 0)], SPEC)
    # compare away from the borders, where nothing is clipped
    core_a = a[8 : 24, 8 : 24]
    core_b = b[8 + di : 24 + di, 8 + dj : 24 + dj]
    assert np.allclose(core_a, core_b, atol=1e-12)


# --------------------------------------------------- modulation and loss


def test_modulation_examples(rng):
    f = T.constant(rng.normal(size=(9, 3)))
    assert np.array_equal(sfp.modulate(f, T.constant(np.ones((9, 1)))).data, f.data)
    assert not sfp.modulate(f, T.constant(np.zeros((9, 1)))).data.any()
    y = rng.uniform(size=(9, 1))
    out = sfp.modulate(f, T.constant(y)).data
    for i in range(9):
        for c in range(3):
            assert out[i, c] == f.data[i, c] * y[i, 0]


def test_loss_examples(rng):
    m = rng.uniform(size=(16, 1))
    assert sfp.sfp_loss(T.constant(m), m).item() == 0.0
    assert sfp.sfp_loss(T.constant(np.zeros((16, 1))), np.ones((4, 4))).item() == 1.0
    a, b = rng.uniform(size=(16, 1)), rng.uniform(size=(16, 1))
    assert sfp.sfp_loss(T.constant(a), b).item() == pytest.approx(sum((a[i, 0] - b[i, 0]) ** 2 for i in range(16)) / 16)


# ------------------------------------------------- background suppression


def _suppression_ratio(model, samples):
    """Mean |modulated feature| on background cells over that on peak cells."""
    P = model.params
    H, W, _ = model.cfg.grid
    bg, fg = [], []
    for s in samples:
        f_s = s.search.features @ P["pillar.proj"].data
        f_t = s.template.features @ P["pillar.proj"].data
        heat = sfp.sfp_forward(T.constant(np.hstack([f_t, f_s])), P, H, W).data
        mag = np.abs(f_s * heat).mean(axis=1)
        bg.append(mag[s.heatmap < 0.1])
        fg.append(mag[s.heatmap > 0.9])
    return float(np.concatenate(bg).mean() / np.concatenate(fg).mean())


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_background_suppression_improves_over_five_epochs(seed):
    cfg = Config(grid=(32, 32, 16), pool_size=16, epochs=5, lr=1e-3, batch=4, seed=seed)
    seqs = [generate_sequence(1000 * seed + i, 10) for i in range(24)]
    spec = grid_spec(cfg)
    probe = [make_sample(s, t, cfg, spec) for s in seqs[:6] for t in (1, 5, 9)]
    model = TrackerModel(cfg)
    ratios = [_suppression_ratio(model, probe)]
    train(seqs, cfg, model=model, on_epoch=lambda _: ratios.append(_suppression_ratio(model, probe)))
    assert all(b < a for a, b in zip(ratios, ratios[1:])), f"ratios per epoch: {np.round(ratios, 4)}"
