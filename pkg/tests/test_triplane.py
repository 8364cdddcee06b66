"""Triplane field tests: plane lookup oracle, decoding, volume rendering,
chunked-render equivalence, and the memory-bounded gradient path."""

import numpy as np
import pytest

from tricast import tensor as T
from tricast.camera import CameraPose, generate_rays, look_at
from tricast.tensor import NumericError, Tensor
from tricast.triplane import (Triplane, decode_point, init_nerf_decoder,
                              render_image, render_image_backprop,
                              sample_triplane, volume_render)


def _bilin(plane: np.ndarray, row: float, col: float) -> np.ndarray:
    """Reference bilinear lookup: row/col in [-1,1] across texel centers."""
    h, w, _ = plane.shape
    r = np.clip((row + 1) / 2 * (h - 1), 0, h - 1)
    c = np.clip((col + 1) / 2 * (w - 1), 0, w - 1)
    r0 = min(int(np.floor(r)), h - 2)
    c0 = min(int(np.floor(c)), w - 2)
    fr, fc = r - r0, c - c0
    return ((1 - fr) * (1 - fc) * plane[r0, c0]
            + (1 - fr) * fc * plane[r0, c0 + 1]
            + fr * (1 - fc) * plane[r0 + 1, c0]
            + fr * fc * plane[r0 + 1, c0 + 1])


def _oracle_features(tp: Triplane, pts: np.ndarray) -> np.ndarray:
    """Independent per-plane oracle: plane 'ab' indexed [p_a, p_b]."""
    out = []
    for p in pts:
        f_xy = _bilin(tp.xy.data, p[0], p[1])
        f_yz = _bilin(tp.yz.data, p[1], p[2])
        f_xz = _bilin(tp.xz.data, p[0], p[2])
        out.append(np.concatenate([f_xy, f_yz, f_xz]))
    return np.array(out)


def _random_tp(rng, res=8, feat=4, dtype=np.float64, requires_grad=False):
    mk = lambda: Tensor(rng.uniform(-1, 1, (res, res, feat)).astype(dtype),
                        requires_grad=requires_grad)
    return Triplane(mk(), mk(), mk())


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_constant_planes_give_constant_concat():
    mk = lambda v: np.full((4, 4, 2), v)
    tp = Triplane(mk(1.0), mk(2.0), mk(3.0))
    pts = np.random.default_rng(0).uniform(-1, 1, (10, 3))
    out = sample_triplane(tp, pts).data
    assert np.allclose(out, [1, 1, 2, 2, 3, 3])


def test_feature_width_is_three_times_plane_depth():
    tp = _random_tp(np.random.default_rng(1), res=6, feat=5)
    out = sample_triplane(tp, np.zeros((3, 3)))
    assert out.shape == (3, 15)


def test_sampling_matches_oracle_on_500_points():
    rng = np.random.default_rng(2)
    tp = _random_tp(rng, res=9, feat=4)
    pts = rng.uniform(-1, 1, (500, 3))
    got = sample_triplane(tp, pts).data
    want = _oracle_features(tp, pts)
    assert np.abs(got - want).max() <= 1e-6


def test_sampling_clamps_outside_points():
    rng = np.random.default_rng(3)
    tp = _random_tp(rng)
    outside = np.array([[1.7, -2.3, 0.1]])
    clamped = np.clip(outside, -1, 1)
    assert np.allclose(sample_triplane(tp, outside).data,
                       sample_triplane(tp, clamped).data)


def test_sampling_rejects_nonfinite_points():
    tp = _random_tp(np.random.default_rng(4))
    with pytest.raises(NumericError):
        sample_triplane(tp, np.array([[0.0, np.inf, 0.0]]))


def test_sampling_gradients_flow_to_planes_and_points():
    rng = np.random.default_rng(5)
    tp = _random_tp(rng, res=5, feat=2, requires_grad=True)
    pts = Tensor(rng.uniform(-0.8, 0.8, (6, 3)), requires_grad=True)
    head = rng.standard_normal((6, 6))

    def f(xy, yz, xz, p):
        return (sample_triplane(Triplane(xy, yz, xz), p) * Tensor(head)).sum()

    err = T.check_gradient(f, [tp.xy, tp.yz, tp.xz, pts])
    assert err <= 1e-4


def test_plane_permutation_with_permuted_decoder_weights():
    rng = np.random.default_rng(6)
    tp = _random_tp(rng, res=7, feat=4)
    params = {k: Tensor(v.data.astype(np.float64))
              for k, v in init_nerf_decoder(rng, d_in=12).items()}
    pts = rng.uniform(-1, 1, (50, 3))

    sig, rgb = decode_point(sample_triplane(tp, pts), params)

    # feed the same features in the order (yz, xz, xy) with the first-layer
    # weight rows permuted the same way -> must decode identically
    f = _oracle_features(tp, pts)
    f_perm = np.concatenate([f[:, 4:8], f[:, 8:12], f[:, 0:4]], axis=1)
    w0 = params["w0"].data
    params_perm = dict(params)
    params_perm["w0"] = Tensor(np.concatenate([w0[4:8], w0[8:12], w0[0:4]], axis=0))
    sig2, rgb2 = decode_point(f_perm, params_perm)

    assert np.abs(sig.data - sig2.data).max() <= 1e-10
    assert np.abs(rgb.data - rgb2.data).max() <= 1e-10


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def test_decode_zero_params_gives_activation_at_zero():
    rng = np.random.default_rng(7)
    params = init_nerf_decoder(rng, d_in=6)
    for v in params.values():
        v.data[...] = 0.0
    sig, rgb = decode_point(np.zeros((4, 6), dtype=np.float32), params)
    assert np.allclose(sig.data, np.log(2.0), atol=1e-6)   # softplus(0)
    assert np.allclose(rgb.data, 0.5)


def test_decode_density_nonnegative():
    rng = np.random.default_rng(8)
    params = init_nerf_decoder(rng, d_in=9)
    feat = rng.uniform(-5, 5, (100, 9)).astype(np.float32)
    sig, rgb = decode_point(feat, params)
    assert (sig.data >= 0).all()
    assert (rgb.data > 0).all() and (rgb.data < 1).all()


def test_decode_rejects_width_mismatch():
    params = init_nerf_decoder(np.random.default_rng(9), d_in=6)
    with pytest.raises(ValueError):
        decode_point(np.zeros((2, 7), dtype=np.float32), params)


def test_decode_gradient_check():
    rng = np.random.default_rng(10)
    params = {k: Tensor(v.data.astype(np.float64), requires_grad=True)
              for k, v in init_nerf_decoder(rng, d_in=6, hidden=8).items()}
    feat = Tensor(rng.uniform(-1, 1, (5, 6)), requires_grad=True)
    hs = rng.standard_normal(5)
    hc = rng.standard_normal((5, 3))

    names = sorted(params)

    def f(feat, *ws):
        p = dict(zip(names, ws))
        sig, rgb = decode_point(feat, p)
        return (sig * Tensor(hs)).sum() + (rgb * Tensor(hc)).sum()

    err = T.check_gradient(f, [feat] + [params[k] for k in names])
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# volume rendering
# ---------------------------------------------------------------------------

def _front_cam():
    return look_at((0.0, 0.0, 2.2), (0, 0, 0), foc_x=1.1, foc_y=1.1)


def test_empty_field_renders_background():
    def empty(pts):
        return np.zeros(len(pts)), np.zeros((len(pts), 3))

    rays = generate_rays(_front_cam(), 8, 8)
    out = volume_render(None, rays, 16, field_fn=empty)
    assert np.allclose(out.rgb.data, 1.0)
    assert np.allclose(out.opacity.data, 0.0)


def test_homogeneous_slab_opacity_closed_form():
    # constant density 2.0; a ray starting inside the box with 0.5 to travel
    sigma0, length = 2.0, 0.5

    def fog(pts):
        return np.full(len(pts), sigma0), np.zeros((len(pts), 3))

    from tricast.camera import RayBundle
    o = np.array([[1.0 - length, 0.0, 0.0]])
    d = np.array([[1.0, 0.0, 0.0]])
    rays = RayBundle(o, d, np.array([0.0]), np.array([length]),
                     np.array([True]))
    out = volume_render(None, rays, 128, field_fn=fog)
    want = 1.0 - np.exp(-sigma0 * length)
    assert abs(float(out.opacity.data[0]) - want) <= 1e-3
    assert abs(float(out.opacity.data[0]) - want) <= 1e-9  # piecewise-exact quadrature


def test_depth_of_opaque_wall():
    wall_z = 0.3

    def wall(pts):
        sigma = np.where(pts[:, 2] < wall_z, 1000.0, 0.0)
        return sigma, np.full((len(pts), 3), 0.5)

    rays = generate_rays(_front_cam(), 5, 5)
    n = 128
    out = volume_render(None, rays, n, field_fn=wall)
    center = 12  # middle pixel, shoots straight down -z from (0,0,2.2)
    expect = 2.2 - wall_z
    spacing = 2.0 / n
    assert abs(float(out.depth.data[center]) - expect) <= 2 * spacing
    assert float(out.opacity.data[center]) >= 0.999


def test_opacity_monotone_in_density_scale():
    rng = np.random.default_rng(11)

    def field(scale):
        def f(pts):
            s = scale * (1.2 + np.sin(3 * pts[:, 0]) * np.cos(2 * pts[:, 1]))
            return s, np.full((len(pts), 3), 0.3)
        return f

    rays = generate_rays(_front_cam(), 6, 6)
    lo = volume_render(None, rays, 32, field_fn=field(1.0)).opacity.data
    hi = volume_render(None, rays, 32, field_fn=field(2.5)).opacity.data
    assert (hi >= lo - 1e-12).all()


def test_missed_rays_are_background_with_zero_opacity():
    # camera looking away from the box: every ray misses
    away = look_at((0, 0, 5.0), (0, 0, 10.0), foc_x=2.0, foc_y=2.0)
    rng = np.random.default_rng(12)
    tp = _random_tp(rng, dtype=np.float32)
    params = init_nerf_decoder(rng, d_in=12)
    rays = generate_rays(away, 4, 4)
    assert not rays.hit.any()
    out = volume_render(tp, rays, 8, params)
    assert np.allclose(out.rgb.data, 1.0)
    assert np.allclose(out.opacity.data, 0.0)
    assert np.allclose(out.depth.data, 0.0)


def test_render_output_ranges():
    rng = np.random.default_rng(13)
    tp = _random_tp(rng, dtype=np.float32)
    params = init_nerf_decoder(rng, d_in=12)
    out = render_image(tp, _front_cam(), 16, 16, n_samples=32, params=params)
    rgb, opa, dep = out.rgb.data, out.opacity.data, out.depth.data
    assert rgb.min() >= 0 and rgb.max() <= 1 + 1e-6
    assert opa.min() >= 0 and opa.max() <= 1 + 1e-6
    assert (dep[opa > 0.01] > 0).all()


def test_chunked_render_matches_unchunked():
    rng = np.random.default_rng(14)
    tp = _random_tp(rng, dtype=np.float32)
    params = init_nerf_decoder(rng, d_in=12)
    whole = render_image(tp, _front_cam(), 16, 16, chunk_size=256,
                         n_samples=16, params=params)
    parts = render_image(tp, _front_cam(), 16, 16, chunk_size=37,
                         n_samples=16, params=params)
    assert np.abs(whole.rgb.data - parts.rgb.data).max() <= 1e-6
    assert np.abs(whole.depth.data - parts.depth.data).max() <= 1e-6


def test_chunked_render_matches_with_stratified_jitter():
    rng = np.random.default_rng(15)
    tp = _random_tp(rng, dtype=np.float32)
    params = init_nerf_decoder(rng, d_in=12)
    whole = render_image(tp, _front_cam(), 12, 12, chunk_size=144,
                         n_samples=16, params=params,
                         rng=np.random.default_rng(77))
    parts = render_image(tp, _front_cam(), 12, 12, chunk_size=31,
                         n_samples=16, params=params,
                         rng=np.random.default_rng(77))
    assert np.abs(whole.rgb.data - parts.rgb.data).max() <= 1e-6


def test_render_is_deterministic():
    rng = np.random.default_rng(16)
    tp = _random_tp(rng, dtype=np.float32)
    params = init_nerf_decoder(rng, d_in=12)
    a = render_image(tp, _front_cam(), 8, 8, n_samples=16, params=params)
    b = render_image(tp, _front_cam(), 8, 8, n_samples=16, params=params)
    assert (a.rgb.data == b.rgb.data).all()
    assert (a.depth.data == b.depth.data).all()


def test_bad_chunk_and_sample_counts():
    rng = np.random.default_rng(17)
    tp = _random_tp(rng, dtype=np.float32)
    params = init_nerf_decoder(rng, d_in=12)
    with pytest.raises(ValueError):
        render_image(tp, _front_cam(), 8, 8, chunk_size=0, params=params)
    rays = generate_rays(_front_cam(), 4, 4)
    with pytest.raises(ValueError):
        volume_render(tp, rays, 1, params)
    with pytest.raises(ValueError):
        volume_render(None, rays, 8)  # no field at all


# ---------------------------------------------------------------------------
# chunked gradients and memory
# ---------------------------------------------------------------------------

def _loss_weights(rng, h, w):
    return (rng.standard_normal((h, w, 3)), rng.standard_normal((h, w)),
            rng.standard_normal((h, w)))


def test_chunked_gradients_match_unchunked():
    rng = np.random.default_rng(18)
    tp = _random_tp(rng, res=6, feat=4, dtype=np.float64, requires_grad=True)
    params = {k: Tensor(v.data.astype(np.float64), requires_grad=True)
              for k, v in init_nerf_decoder(rng, d_in=12, hidden=8).items()}
    h = w = 12
    wr, wd, wo = _loss_weights(rng, h, w)

    def loss_fn(out):
        return ((out.rgb * Tensor(wr)).sum() + (out.depth * Tensor(wd)).sum()
                + (out.opacity * Tensor(wo)).sum())

    # unchunked: one tape over the whole render
    with T.Tape() as tape:
        out = render_image(tp, _front_cam(), w, h, chunk_size=10 ** 9,
                           n_samples=12, params=params)
        loss = loss_fn(out)
    tape.backward(loss)
    ref = {**{f"p{i}": p.grad.copy() for i, p in enumerate(tp.planes)},
           **{k: v.grad.copy() for k, v in params.items()}}
    for p in (*tp.planes, *params.values()):
        p.zero_grad()

    loss_val, _ = render_image_backprop(tp, _front_cam(), w, h, loss_fn,
                                        chunk_size=29, n_samples=12,
                                        params=params)
    assert loss_val == pytest.approx(float(loss.data), rel=1e-12)
    for i, p in enumerate(tp.planes):
        assert np.abs(p.grad - ref[f"p{i}"]).max() <= 1e-5
    for k, v in params.items():
        assert np.abs(v.grad - ref[k]).max() <= 1e-5


def test_chunked_backprop_bounds_live_activations():
    rng = np.random.default_rng(19)
    tp = _random_tp(rng, res=8, feat=4, dtype=np.float32, requires_grad=True)
    params = init_nerf_decoder(rng, d_in=12)
    h = w = 24
    wr, wd, wo = _loss_weights(rng, h, w)

    def loss_fn(out):
        return ((out.rgb * Tensor(wr.astype(np.float32))).sum()
                + (out.depth * Tensor(wd.astype(np.float32))).sum()
                + (out.opacity * Tensor(wo.astype(np.float32))).sum())

    # whole-image tape footprint
    T.reset_peak_saved_floats()
    with T.Tape() as tape:
        out = render_image(tp, _front_cam(), w, h, chunk_size=10 ** 9,
                           n_samples=24, params=params)
        loss = loss_fn(out)
    peak_unchunked = T.peak_saved_floats()
    tape.backward(loss)
    for p in (*tp.planes, *params.values()):
        p.zero_grad()

    # chunked path footprint: one chunk of activations plus the loss tape
    T.reset_peak_saved_floats()
    render_image_backprop(tp, _front_cam(), w, h, loss_fn, chunk_size=48,
                          n_samples=24, params=params)
    peak_chunked = T.peak_saved_floats()
    assert peak_chunked < peak_unchunked / 3
