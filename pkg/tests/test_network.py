import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from ttoreg import _io
from ttoreg.field import warp_volume
from ttoreg.loss import LossConfig
from ttoreg.network import (
    ArchitectureSpec,
    DivergenceError,
    ModelParameters,
    conv3d,
    conv3d_backward,
    forward,
    init_params,
    leaky_relu,
    leaky_relu_backward,
    load_checkpoint,
    loss_and_gradients,
    save_checkpoint,
    upsample2,
    upsample2_backward,
)
from ttoreg.volume import Volume

from conftest import central_difference, rel_error

TOY = ArchitectureSpec("plain-cnn", filters=4, n_layers=2)


def smooth_pair(rng, shape):
    a = gaussian_filter(rng.standard_normal(shape), 1.0)
    b = gaussian_filter(rng.standard_normal(shape), 1.0)
    return a / np.abs(a).max(), 0.5 * a / np.abs(a).max() + 0.5 * b / np.abs(b).max()


def kink_free_params(arch, seed=0):
    """float64 parameters whose activations and sample points stay clear of kinks.

    Hidden biases of +/-0.6 with small weights keep every LeakyReLU input away
    from zero (both branches used); final biases of 0.3-0.4 with tiny weights
    keep every sample coordinate strictly between grid points.
    """
    g = np.random.default_rng(seed)
    parts = []
    for _ in range(arch.cascade_stages):
        for spec in arch.layers():
            if spec.act:
                parts.append(g.uniform(-0.02, 0.02, spec.n_weights))
                parts.append(np.where(np.arange(spec.cout) % 2 == 0, 0.6, -0.6))
            else:
                parts.append(g.uniform(-0.005, 0.005, spec.n_weights))
                parts.append(np.array([0.3, 0.35, 0.4]))
    return ModelParameters(np.concatenate(parts), arch, seed=seed)


# -- architecture and init ------------------------------------------------------

def test_plain_cnn_has_ten_layers():
    layers = ArchitectureSpec().layers()
    assert len(layers) == 10
    assert [l.cout for l in layers] == [16] * 9 + [3]
    assert layers[-1].act is False and all(l.act for l in layers[:-1])


def test_encoder_decoder_layout():
    layers = ArchitectureSpec("encoder-decoder", filters=16, depth=2).layers()
    assert [l.stride for l in layers] == [1, 2, 2, 1, 1, 1, 1]
    assert [l.cin for l in layers] == [2, 16, 16, 16, 32, 32, 16]


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchitectureSpec("unet")
    with pytest.raises(ValueError):
        ArchitectureSpec(cascade_stages=0)
    with pytest.raises(ValueError):
        ArchitectureSpec("encoder-decoder", filters=40)


def test_init_is_deterministic_and_seeded():
    arch = ArchitectureSpec(cascade_stages=2)
    a, b, c = init_params(arch, 1), init_params(arch, 1), init_params(arch, 2)
    assert a == b
    assert not np.array_equal(a.blob, c.blob)
    assert a.blob.size == arch.n_params and a.blob.dtype == np.float32


def test_init_bounds_and_zero_final_layer():
    p = init_params(ArchitectureSpec(), 3)
    (w0, b0), *_, (wl, bl) = p.stages()[0]
    assert np.abs(w0).max() <= np.sqrt(1 / 54) and not b0.any()
    assert not wl.any() and not bl.any()


def test_params_reject_bad_blob():
    with pytest.raises(ValueError):
        ModelParameters(np.zeros(3), TOY)
    bad = np.zeros(TOY.n_params)
    bad[0] = np.nan
    with pytest.raises(ValueError):
        ModelParameters(bad, TOY)


@pytest.mark.parametrize("arch", [ArchitectureSpec(filters=4), ArchitectureSpec("encoder-decoder", filters=4),
                                  ArchitectureSpec(filters=4, n_layers=3, cascade_stages=3)])
def test_fresh_model_predicts_zero_field(rng, arch):
    m, f = (Volume(x) for x in rng.random((2, 8, 8, 8)))
    u = forward(init_params(arch, 5), m, f)
    assert not u.vectors.any()
    assert warp_volume(m, u) == m


def test_forward_checks_shapes(rng):
    p = init_params(ArchitectureSpec("encoder-decoder", filters=2, depth=2), 0)
    with pytest.raises(ValueError, match="divisible"):
        forward(p, np.zeros((6, 8, 8)), np.zeros((6, 8, 8)))
    with pytest.raises(ValueError):
        forward(p, np.zeros((8, 8, 8)), np.zeros((8, 8, 4)))


def test_forward_is_deterministic(rng):
    p = kink_free_params(ArchitectureSpec("encoder-decoder", filters=4, cascade_stages=2)).astype(np.float32)
    m, f = smooth_pair(rng, (8, 8, 8))
    assert forward(p, m, f).vectors.tobytes() == forward(p, m, f).vectors.tobytes()


def test_single_stage_cascade_is_base_network(rng):
    base = kink_free_params(ArchitectureSpec(filters=4, n_layers=3))
    one = ModelParameters(base.blob, ArchitectureSpec(filters=4, n_layers=3, cascade_stages=1))
    m, f = smooth_pair(rng, (6, 6, 6))
    assert forward(base, m, f) == forward(one, m, f)


def test_cascade_of_zero_stages_is_zero(rng):
    arch = ArchitectureSpec(filters=4, n_layers=3, cascade_stages=4)
    m, f = smooth_pair(rng, (6, 6, 6))
    assert not forward(init_params(arch, 9), m, f).vectors.any()


def test_identical_pair_is_at_optimum(rng):
    img = rng.random((6, 6, 6))
    p = init_params(TOY, 0)
    assert loss_and_gradients(p, img, img, LossConfig("mse"))[0] == 0.0
    assert loss_and_gradients(p, img, img, LossConfig("ncc", 3))[0] == pytest.approx(-1.0, abs=1e-6)


# -- primitive gradients ---------------------------------------------------------

@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(rng, stride):
    x = rng.standard_normal((6, 6, 6, 2))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    out, xp = conv3d(x, w, b, stride)
    r = rng.standard_normal(out.shape)
    dw, db, dx = conv3d_backward(xp, w, r, stride)
    f = lambda xx, ww, bb: float((conv3d(xx, ww, bb, stride)[0] * r).sum())
    assert rel_error(dx, central_difference(lambda v: f(v, w, b), x)) < 1e-3
    assert rel_error(dw, central_difference(lambda v: f(x, v, b), w)) < 1e-3
    assert rel_error(db, central_difference(lambda v: f(x, w, v), b)) < 1e-3


def test_conv_matches_direct_sum(rng):
    x = rng.standard_normal((4, 5, 3, 2))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)
    out, _ = conv3d(x, w, b)
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    z, y, xx, co = 2, 3, 1, 1
    want = b[co] + sum(w[co, ci, kz, ky, kx] * xp[z + kz, y + ky, xx + kx, ci]
                       for ci in range(2) for kz in range(3) for ky in range(3) for kx in range(3))
    assert out[z, y, xx, co] == pytest.approx(want, rel=1e-12)


def test_leaky_relu_gradient(rng):
    z = rng.standard_normal((4, 4, 4, 2))
    z[np.abs(z) < 0.05] = 0.5
    r = rng.standard_normal(z.shape)
    num = central_difference(lambda v: float((leaky_relu(v, 0.2) * r).sum()), z)
    assert rel_error(leaky_relu_backward(z, r, 0.2), num) < 1e-3
    assert leaky_relu(np.array([-1.0, 2.0]), 0.2).tolist() == [-0.2, 2.0]


def test_upsample_values_and_adjoint(rng):
    x = np.arange(3.0).reshape(1, 1, 3, 1).repeat(2, 0).repeat(2, 1)
    row = upsample2(x)[0, 0, :, 0]
    assert row.tolist() == [0.0, 0.25, 0.75, 1.25, 1.75, 2.0]
    x = rng.standard_normal((3, 2, 4, 2))
    g = rng.standard_normal((6, 4, 8, 2))
    assert (upsample2(x) * g).sum() == pytest.approx((x * upsample2_backward(g)).sum(), rel=1e-12)


# -- end-to-end gradients --------------------------------------------------------

E2E_ARCHS = [
    TOY,
    ArchitectureSpec("plain-cnn", filters=3, n_layers=2, cascade_stages=2),
    ArchitectureSpec("encoder-decoder", filters=2, depth=1),
]


@pytest.mark.parametrize("arch", E2E_ARCHS, ids=lambda a: a.label())
@pytest.mark.parametrize("cfg", [LossConfig("ncc", 3, 0.5), LossConfig("mse", lam=0.5)],
                         ids=["ncc", "mse"])
def test_end_to_end_gradient(rng, arch, cfg):
    p = kink_free_params(arch)
    m, f = smooth_pair(rng, (6, 6, 6))
    _, grad = loss_and_gradients(p, m, f, cfg)
    num = central_difference(lambda b: loss_and_gradients(p.with_blob(b), m, f, cfg)[0], p.blob.copy())
    assert rel_error(grad, num) < 1e-3


def test_gradient_linear_in_lambda(rng):
    p = kink_free_params(TOY)
    m, f = smooth_pair(rng, (6, 6, 6))
    g0, g1, g2 = (loss_and_gradients(p, m, f, LossConfig("ncc", 3, lam))[1] for lam in (0.0, 1.0, 2.0))
    assert np.allclose(g2 - g0, 2 * (g1 - g0), rtol=1e-9, atol=1e-12)


def test_non_finite_field_raises_divergence(rng):
    blob = np.zeros(TOY.n_params, np.float32)
    blob[:] = 3e38
    p = ModelParameters(blob, TOY)
    m, f = smooth_pair(rng, (6, 6, 6))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError):
            loss_and_gradients(p, m, f, LossConfig())


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    arch = ArchitectureSpec("encoder-decoder", filters=4, cascade_stages=2)
    p = ModelParameters(rng.standard_normal(arch.n_params).astype(np.float32), arch, 7, "population")
    path = save_checkpoint(p, tmp_path / "pop")
    assert path.name == "pop.ckpt.json"
    back = load_checkpoint(tmp_path / "pop.ckpt.json")
    assert back == p and back.blob.tobytes() == p.blob.tobytes()
    meta = _io.read_json(path)
    assert meta["blob_bytes"] == 4 * arch.n_params and meta["provenance"] == "population"
    # documented layout: first weight is W[out=0][in=0][0][0][0]
    raw = np.frombuffer((tmp_path / "pop.ckpt.raw").read_bytes(), "<f4")
    assert raw[0] == p.stages()[0][0][0][0, 0, 0, 0, 0]


def test_corrupted_checkpoint_rejected(tmp_path):
    save_checkpoint(init_params(TOY, 0), tmp_path / "m")
    raw = tmp_path / "m.ckpt.raw"
    raw.write_bytes(raw.read_bytes() + b"\0\0\0\0")
    with pytest.raises(_io.FormatError, match="bytes"):
        load_checkpoint(tmp_path / "m")
