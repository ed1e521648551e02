"""Displacement-predicting networks with hand-written reverse-mode gradients.

Two stage architectures are provided:

* ``plain-cnn``: ``n_layers`` 3x3x3 convolutions at full resolution, every
  hidden layer followed by LeakyReLU, the last one emitting 3 channels.
* ``encoder-decoder``: strided-convolution encoder, trilinear x2 upsampling
  decoder with skip concatenation, same final 3-channel convolution.

A cascade runs ``cascade_stages`` independent stages; stage k sees the moving
image warped by the running field and its prediction is composed onto it.

Activations are channels-last ``(nz, ny, nx, c)`` arrays.  The flat parameter
blob stores, for every stage in order and every layer in order, the weights as
``[out][in][kz][ky][kx]`` followed by the biases ``[out]``.
"""
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import _io, kernels
from .field import (
    DisplacementField,
    compose_arrays,
    compose_backward,
    warp_array,
    warp_array_backward,
)
from .loss import total_loss_and_grads

KINDS = ("plain-cnn", "encoder-decoder")
PROVENANCE = ("none", "population", "individualized", "fractional")


class DivergenceError(FloatingPointError):
    """The loss or a gradient became non-finite."""


@dataclass(frozen=True)
class LayerSpec:
    cin: int
    cout: int
    stride: int = 1
    act: bool = True

    @property
    def n_weights(self):
        return self.cout * self.cin * 27

    @property
    def n_params(self):
        return self.n_weights + self.cout


@dataclass(frozen=True)
class ArchitectureSpec:
    """Network layout.

    ``n_layers`` counts every convolution of a plain CNN including the final
    3-channel one; ``depth`` is the number of stride-2 levels of the
    encoder-decoder.
    """

    kind: str = "plain-cnn"
    filters: int = 16
    n_layers: int = 10
    depth: int = 2
    cascade_stages: int = 1
    slope: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.cascade_stages < 1:
            raise ValueError("cascade_stages must be >= 1")
        if self.filters < 1 or self.n_layers < 1 or self.depth < 1:
            raise ValueError("filters, n_layers and depth must be positive")
        if max(layer.cin for layer in self.layers()) > 64:
            raise ValueError("layers wider than 64 channels are not supported")

    def layers(self):
        """Layer list of one cascade stage."""
        f = self.filters
        if self.kind == "plain-cnn":
            if self.n_layers == 1:
                return [LayerSpec(2, 3, act=False)]
            return ([LayerSpec(2, f)] + [LayerSpec(f, f)] * (self.n_layers - 2)
                    + [LayerSpec(f, 3, act=False)])
        return ([LayerSpec(2, f)] + [LayerSpec(f, f, stride=2)] * self.depth
                + [LayerSpec(f, f)] + [LayerSpec(2 * f, f)] * self.depth
                + [LayerSpec(f, 3, act=False)])

    @property
    def n_params_stage(self):
        return sum(layer.n_params for layer in self.layers())

    @property
    def n_params(self):
        return self.n_params_stage * self.cascade_stages

    def check_shape(self, shape):
        if self.kind == "encoder-decoder":
            m = 2 ** self.depth
            if any(n % m for n in shape):
                raise ValueError(
                    f"encoder-decoder with depth {self.depth} needs every dim divisible by {m}, "
                    f"got {tuple(reversed(shape))}"
                )

    def label(self):
        base = "cnn" if self.kind == "plain-cnn" else "encdec"
        return f"{base}x{self.cascade_stages}"

    def to_dict(self):
        return {
            "kind": self.kind, "filters": self.filters, "n_layers": self.n_layers,
            "depth": self.depth, "cascade_stages": self.cascade_stages, "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ModelParameters:
    blob: np.ndarray
    arch: ArchitectureSpec
    seed: int = 0
    provenance: str = "none"

    def __post_init__(self):
        blob = np.asarray(self.blob)
        if blob.ndim != 1 or blob.size != self.arch.n_params:
            raise ValueError(f"blob has {blob.size} entries, architecture needs {self.arch.n_params}")
        if blob.dtype not in (np.float32, np.float64):
            blob = blob.astype(np.float32)
        if not np.all(np.isfinite(blob)):
            raise ValueError("parameters contain non-finite values")
        if self.provenance not in PROVENANCE:
            raise ValueError(f"provenance must be one of {PROVENANCE}")
        if blob.flags.writeable:
            blob = blob.copy()
            blob.flags.writeable = False
        object.__setattr__(self, "blob", blob)

    def with_blob(self, blob, provenance=None):
        return replace(self, blob=blob, provenance=provenance or self.provenance)

    def astype(self, dtype):
        return replace(self, blob=self.blob.astype(dtype))

    def stages(self):
        """Per-stage lists of ``(W, b)`` views, ``W`` shaped (out, in, 3, 3, 3)."""
        out, pos = [], 0
        specs = self.arch.layers()
        for _ in range(self.arch.cascade_stages):
            stage = []
            for spec in specs:
                w = self.blob[pos:pos + spec.n_weights].reshape(spec.cout, spec.cin, 3, 3, 3)
                pos += spec.n_weights
                b = self.blob[pos:pos + spec.cout]
                pos += spec.cout
                stage.append((w, b))
            out.append(stage)
        return out

    def __eq__(self, other):
        if not isinstance(other, ModelParameters):
            return NotImplemented
        return (self.arch == other.arch and self.seed == other.seed
                and self.provenance == other.provenance
                and self.blob.dtype == other.blob.dtype and np.array_equal(self.blob, other.blob))

    __hash__ = None


def init_params(arch, seed):
    """Uniform(-a, a) hidden weights with a = sqrt(1 / fan_in); zero biases.

    The final layer of every stage is all zeros, so a fresh model predicts
    the zero field.
    """
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(arch.cascade_stages):
        for spec in arch.layers():
            if spec.act:
                a = np.sqrt(1.0 / (spec.cin * 27))
                parts.append(rng.uniform(-a, a, spec.n_weights))
            else:
                parts.append(np.zeros(spec.n_weights))
            parts.append(np.zeros(spec.cout))
    blob = np.concatenate(parts).astype(np.float32)
    return ModelParameters(blob, arch, seed=int(seed), provenance="none")


# -- primitives ---------------------------------------------------------------

_PAD = ((1, 1), (1, 1), (1, 1), (0, 0))


def conv3d(x, w, b, stride=1):
    """3x3x3 convolution, zero padding 1.  Returns ``(out, padded_input)``."""
    xp = np.pad(x, _PAD)
    wt = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
    oshape = tuple((n + stride - 1) // stride for n in x.shape[:3]) + (w.shape[0],)
    out = np.empty(oshape, dtype=x.dtype)
    kernels.conv3d_forward(xp, wt, np.ascontiguousarray(b), out, stride)
    return out, xp


def conv3d_backward(xp, w, dy, stride=1, need_dx=True):
    """Returns ``(dW, db, dx or None)``."""
    dy = np.ascontiguousarray(dy)
    dwt = np.zeros((3, 3, 3, w.shape[1], w.shape[0]), dtype=dy.dtype)
    kernels.conv3d_backward_weight(xp, dy, dwt, stride)
    dw = dwt.transpose(4, 3, 0, 1, 2)
    db = dy.sum(axis=(0, 1, 2), dtype=np.float64).astype(dy.dtype)
    dx = None
    if need_dx:
        wt = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
        dxp = np.zeros(xp.shape, dtype=dy.dtype)
        kernels.conv3d_backward_input(dy, wt, dxp, stride)
        dx = dxp[1:-1, 1:-1, 1:-1]
    return dw, db, dx


def leaky_relu(z, slope):
    return np.where(z > 0, z, z * slope)


def leaky_relu_backward(z, dh, slope):
    return np.where(z > 0, dh, dh * slope)


def _axis_slice(ndim, axis, s):
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def upsample2(x):
    """Trilinear x2 upsampling over the three spatial axes (edge-clamped)."""
    for axis in range(3):
        n = x.shape[axis]
        prev = np.take(x, np.clip(np.arange(n) - 1, 0, n - 1), axis=axis)
        nxt = np.take(x, np.clip(np.arange(n) + 1, 0, n - 1), axis=axis)
        even = 0.75 * x + 0.25 * prev
        odd = 0.75 * x + 0.25 * nxt
        x = np.stack([even, odd], axis=axis + 1)
        shape = list(even.shape)
        shape[axis] = 2 * n
        x = x.reshape(shape)
    return x


def upsample2_backward(g):
    for axis in (2, 1, 0):
        nd = g.ndim
        ge = g[_axis_slice(nd, axis, slice(0, None, 2))]
        go = g[_axis_slice(nd, axis, slice(1, None, 2))]
        out = 0.75 * (ge + go)
        # even sample j also reads j - 1 (clamped), odd sample j reads j + 1
        out[_axis_slice(nd, axis, slice(None, -1))] += 0.25 * ge[_axis_slice(nd, axis, slice(1, None))]
        out[_axis_slice(nd, axis, slice(0, 1))] += 0.25 * ge[_axis_slice(nd, axis, slice(0, 1))]
        out[_axis_slice(nd, axis, slice(1, None))] += 0.25 * go[_axis_slice(nd, axis, slice(None, -1))]
        out[_axis_slice(nd, axis, slice(-1, None))] += 0.25 * go[_axis_slice(nd, axis, slice(-1, None))]
        g = out
    return g


# -- one stage ----------------------------------------------------------------

def _stage_forward(arch, layer_params, x):
    specs = arch.layers()
    slope = arch.slope
    tape = []

    def layer(i, inp):
        w, b = layer_params[i]
        z, xp = conv3d(inp, w, b, specs[i].stride)
        tape.append((i, xp, z))
        return leaky_relu(z, slope) if specs[i].act else z

    if arch.kind == "plain-cnn":
        h = x
        for i in range(len(specs)):
            h = layer(i, h)
        return h, tape

    d = arch.depth
    enc = [layer(0, x)]
    for i in range(1, d + 1):
        enc.append(layer(i, enc[-1]))
    h = layer(d + 1, enc[d])
    for j in range(d):
        level = d - 1 - j
        h = layer(d + 2 + j, np.concatenate([upsample2(h), enc[level]], axis=-1))
    return layer(2 * d + 2, h), tape


def _stage_backward(arch, layer_params, tape, dout, need_dx):
    """Returns per-layer ``(dW, db)`` and the input gradient (or None)."""
    specs = arch.layers()
    slope = arch.slope
    grads = [None] * len(specs)
    cache = {i: (xp, z) for i, xp, z in tape}

    def back(i, dh, want_dx=True):
        xp, z = cache[i]
        dz = leaky_relu_backward(z, dh, slope) if specs[i].act else dh
        dw, db, dx = conv3d_backward(xp, layer_params[i][0], dz, specs[i].stride, want_dx)
        grads[i] = (dw, db)
        return dx

    if arch.kind == "plain-cnn":
        g = dout
        for i in reversed(range(len(specs))):
            g = back(i, g, want_dx=(i > 0 or need_dx))
        return grads, g

    d = arch.depth
    f = arch.filters
    g = back(2 * d + 2, dout)
    d_enc = [None] * (d + 1)
    for j in reversed(range(d)):
        level = d - 1 - j
        gc = back(d + 2 + j, g)
        d_enc[level] = gc[..., f:]
        g = upsample2_backward(gc[..., :f])
    g = back(d + 1, g)
    d_enc[d] = g
    for i in range(d, 0, -1):
        d_enc[i - 1] = d_enc[i - 1] + back(i, d_enc[i])
    return grads, back(0, d_enc[0], want_dx=need_dx)


# -- cascade ------------------------------------------------------------------

def _prepare(params, moving, fixed):
    mov = np.asarray(getattr(moving, "data", moving))
    fix = np.asarray(getattr(fixed, "data", fixed))
    if mov.shape != fix.shape:
        raise ValueError(f"moving {mov.shape} and fixed {fix.shape} grids differ")
    params.arch.check_shape(mov.shape)
    dt = params.blob.dtype
    return mov.astype(dt), fix.astype(dt)


def _cascade_forward(params, mov, fix):
    arch = params.arch
    U = None
    tapes = []
    for k, layer_params in enumerate(params.stages()):
        moved_k = mov if U is None else warp_array(mov[..., None], U)[..., 0]
        x = np.stack([moved_k, fix], axis=-1)
        u_k, tape = _stage_forward(arch, layer_params, x)
        if not np.isfinite(u_k).all():
            raise DivergenceError(f"stage {k} produced a non-finite field")
        U_prev = U
        U = u_k if U_prev is None else compose_arrays(U_prev, u_k)
        tapes.append((tape, U_prev, u_k))
    return U, tapes


def _cascade_backward(params, mov, tapes, dU):
    arch = params.arch
    all_stages = params.stages()
    per_stage = [None] * len(tapes)
    for k in reversed(range(len(tapes))):
        tape, U_prev, u_k = tapes[k]
        if U_prev is None:
            du_k, dU_prev = dU, None
        else:
            dU_prev, du_k = compose_backward(U_prev, u_k, dU)
        grads, dx = _stage_backward(arch, all_stages[k], tape, du_k, need_dx=U_prev is not None)
        per_stage[k] = grads
        if U_prev is not None:
            _, dU_in = warp_array_backward(mov[..., None], U_prev, dx[..., :1], want_dvol=False)
            dU = dU_prev + dU_in
    flat = []
    for grads in per_stage:
        for dw, db in grads:
            flat.append(dw.ravel())
            flat.append(db.ravel())
    return np.concatenate(flat).astype(params.blob.dtype)


def forward(params, moving, fixed):
    """Predict the displacement field registering ``moving`` onto ``fixed``."""
    mov, fix = _prepare(params, moving, fixed)
    U, _ = _cascade_forward(params, mov, fix)
    return DisplacementField(U)


def loss_and_gradients(params, moving, fixed, cfg):
    """Total registration loss and its gradient w.r.t. the parameter blob.

    Raises :class:`DivergenceError` if the loss or gradient is non-finite.
    """
    value, grad, _ = evaluate(params, moving, fixed, cfg)
    return value, grad


def evaluate(params, moving, fixed, cfg, need_grad=True):
    """Like :func:`loss_and_gradients` but also returns the predicted field array."""
    mov, fix = _prepare(params, moving, fixed)
    U, tapes = _cascade_forward(params, mov, fix)
    moved = warp_array(mov[..., None], U)[..., 0]
    total, _, _, d_moved, dU_reg = total_loss_and_grads(fix, moved, U, cfg)
    if not np.isfinite(total):
        raise DivergenceError(f"non-finite loss {total}")
    if not need_grad:
        return float(total), None, U
    dt = params.blob.dtype
    _, dU = warp_array_backward(mov[..., None], U, d_moved[..., None].astype(dt), want_dvol=False)
    dU = dU + dU_reg.astype(dt)
    grad = _cascade_backward(params, mov, tapes, dU)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    return float(total), grad, U


# -- checkpoints --------------------------------------------------------------

LAYOUT = "per stage, per layer: weights [out][in][kz][ky][kx] then biases [out]"


def _ckpt_paths(path):
    p = Path(path)
    name = p.name
    for suffix in (".ckpt.json", ".ckpt.raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return p.with_name(name + ".ckpt.json"), p.with_name(name + ".ckpt.raw")


def save_checkpoint(params, path):
    """Write ``<name>.ckpt.json`` + ``<name>.ckpt.raw`` (little-endian float32)."""
    manifest, raw = _ckpt_paths(path)
    payload = np.ascontiguousarray(params.blob, dtype="<f4").tobytes()
    _io.atomic_write_bytes(raw, payload)
    _io.write_json(manifest, {
        "arch": params.arch.to_dict(),
        "seed": int(params.seed),
        "provenance": params.provenance,
        "n_params": int(params.arch.n_params),
        "blob_bytes": len(payload),
        "dtype": "f32le",
        "layout": LAYOUT,
        "data": raw.name,
    })
    return manifest


def load_checkpoint(path):
    manifest, _ = _ckpt_paths(path)
    if not manifest.exists():
        raise FileNotFoundError(f"missing checkpoint manifest {manifest}")
    meta = _io.read_json(manifest)
    arch = ArchitectureSpec.from_dict(meta["arch"])
    raw = manifest.parent / meta["data"]
    if not raw.exists():
        raise FileNotFoundError(f"missing checkpoint payload {raw}")
    payload = raw.read_bytes()
    want = arch.n_params * 4
    if len(payload) != want or meta.get("blob_bytes") != want:
        raise _io.FormatError(
            f"{raw}: payload is {len(payload)} bytes (manifest says {meta.get('blob_bytes')}), "
            f"architecture {arch.label()} needs {want}"
        )
    blob = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return ModelParameters(blob, arch, seed=int(meta["seed"]), provenance=meta["provenance"])
