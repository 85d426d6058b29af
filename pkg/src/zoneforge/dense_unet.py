"""Dense U-net in numpy with a small reverse-mode gradient tape.

Public tensors follow the ``(batch, channels, height, width)`` convention;
kernels are ``(out, in, kh, kw)``. Internally the network runs channels-last
(``NHWC``) with kernels stored ``(kh, kw, in, out)``, which turns every
convolution tap into one matrix product.

Topology (``n_stages`` = S)::

    stem 3x3 conv
    S x [dense block -> skip, transition down]
    bottleneck dense block
    S x [transition up + concat skip, dense block]
    1x1 projection to 3 logits, sigmoid

A dense block holds ``convs_per_block`` 3x3 conv+ReLU layers, each fed with
the concatenation of the block input and all earlier layer outputs; the
block output concatenates the input and every layer output.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .rng import RngState, as_rng

__all__ = [
    "ArchConfig",
    "NetworkParams",
    "Tape",
    "conv2d",
    "conv2d_backward",
    "dense_block",
    "transition_down",
    "transition_up",
    "init_params",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 1
    out_channels: int = 3
    n_stages: int = 3
    convs_per_block: int = 4
    kernel: int = 3
    growth: int = 8
    stem_channels: int = 16
    compression: float = 0.5

    def __post_init__(self):
        if not 1 <= self.in_channels <= 6:
            raise ValueError(f"in_channels must lie in 1..6, got {self.in_channels}")
        if self.out_channels not in (1, 3):
            raise ValueError("out_channels must be 3 (PG, CZ, PZ), or 1 for per-zone networks")
        if self.n_stages < 1 or self.convs_per_block < 1 or self.growth < 1 or self.stem_channels < 1:
            raise ValueError("n_stages, convs_per_block, growth and stem_channels must be positive")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if not 0 < self.compression <= 1:
            raise ValueError("compression must lie in (0, 1]")

    @classmethod
    def desk(cls, in_channels=1, **kw):
        return cls(in_channels=in_channels, **kw)

    @classmethod
    def full_scale(cls, in_channels=1, **kw):
        base = dict(n_stages=4, growth=16, stem_channels=32)
        base.update(kw)
        return cls(in_channels=in_channels, **base)

    def to_dict(self):
        return asdict(self)

    def compressed(self, c):
        return int(math.ceil(self.compression * c))

    def block_out(self, c):
        return c + self.convs_per_block * self.growth

    def channel_plan(self):
        """Closed-form channel counts at every stage, without a forward pass."""
        plan = {"stem": self.stem_channels}
        c = self.stem_channels
        skips = []
        for s in range(self.n_stages):
            c = self.block_out(c)
            plan[f"enc{s}"] = c
            skips.append(c)
            c = self.compressed(c)
            plan[f"down{s}"] = c
        c = self.block_out(c)
        plan["mid"] = c
        for s in reversed(range(self.n_stages)):
            c = self.compressed(c) + skips[s]
            plan[f"up{s}"] = c
            c = self.block_out(c)
            plan[f"dec{s}"] = c
        plan["head"] = self.out_channels
        return plan

    def layer_shapes(self):
        """Ordered ``(name, (kh, kw, c_in, c_out))`` of every conv layer."""
        k = self.kernel
        layers = [("stem", (k, k, self.in_channels, self.stem_channels))]

        def block(prefix, c):
            for i in range(self.convs_per_block):
                layers.append((f"{prefix}.conv{i}", (k, k, c + i * self.growth, self.growth)))
            return self.block_out(c)

        c = self.stem_channels
        skips = []
        for s in range(self.n_stages):
            c = block(f"enc{s}", c)
            skips.append(c)
            layers.append((f"down{s}", (1, 1, c, self.compressed(c))))
            c = self.compressed(c)
        c = block("mid", c)
        for s in reversed(range(self.n_stages)):
            layers.append((f"up{s}", (1, 1, c, self.compressed(c))))
            c = self.compressed(c) + skips[s]
            c = block(f"dec{s}", c)
        layers.append(("head", (1, 1, c, self.out_channels)))
        return layers

    def n_params(self):
        return sum(int(np.prod(s)) + s[3] for _, s in self.layer_shapes())


class NetworkParams:
    """All weights and biases of one Dense U-net plus its architecture.

    ``arrays`` maps ``"<layer>.w"`` (``kh, kw, in, out``) and ``"<layer>.b"``
    to numpy arrays, in :meth:`ArchConfig.layer_shapes` order.
    """

    def __init__(self, arch, arrays):
        self.arch = arch
        expected = []
        for name, shape in arch.layer_shapes():
            expected += [(f"{name}.w", shape), (f"{name}.b", (shape[3],))]
        if [k for k, _ in expected] != list(arrays):
            raise ShapeError("parameter names do not match the architecture")
        for key, shape in expected:
            if tuple(arrays[key].shape) != shape:
                raise ShapeError(f"{key}: expected shape {shape}, got {arrays[key].shape}")
        self.arrays = dict(arrays)

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def astype(self, dtype):
        return NetworkParams(self.arch, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self):
        return NetworkParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def n_params(self):
        return sum(v.size for v in self.arrays.values())

    def flat(self):
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def __eq__(self, other):
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return self.arch == other.arch and all(
            a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.arrays.values(), other.arrays.values())
        )

    __hash__ = None


def init_params(arch, rng=None, dtype=np.float32):
    """He-normal kernels (variance ``2 / fan_in``) and zero biases."""
    rng = as_rng(rng)
    arrays = {}
    for name, shape in arch.layer_shapes():
        fan_in = shape[0] * shape[1] * shape[2]
        w = rng.normal(shape) * math.sqrt(2.0 / fan_in)
        arrays[f"{name}.w"] = w.astype(dtype)
        arrays[f"{name}.b"] = np.zeros(shape[3], dtype=dtype)
    return NetworkParams(arch, arrays)


# --- NHWC kernels ------------------------------------------------------------


def _conv_fwd(x, w, b, pad):
    kh, kw, c, o = w.shape
    if x.shape[-1] != c:
        raise ShapeError(f"conv expects {c} input channels, got {x.shape[-1]}")
    n, h, wd, _ = x.shape
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    if kh == 1 and kw == 1 and pad == 0:
        return x @ w[0, 0] + b, x
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    y = np.empty((n, ho, wo, o), dtype=np.result_type(x, w))
    y[...] = b
    for i in range(kh):
        for j in range(kw):
            y += xp[:, i : i + ho, j : j + wo, :] @ w[i, j]
    return y, xp


def _conv_bwd(g, xp, w, pad):
    kh, kw, c, o = w.shape
    n, ho, wo, _ = g.shape
    db = g.sum(axis=(0, 1, 2))
    if kh == 1 and kw == 1 and pad == 0:
        dw = (xp.reshape(-1, c).T @ g.reshape(-1, o))[None, None]
        return g @ w[0, 0].T, dw, db
    # kernel gradient: batched (o x wo) @ (wo x c) per image row, summed
    gt = np.ascontiguousarray(g.transpose(0, 1, 3, 2))
    dw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            dw[i, j] = (gt @ xp[:, i : i + ho, j : j + wo, :]).sum(axis=(0, 1)).T
    # input gradient: im2col of the padded cotangent against the flipped kernel
    ph, pw = kh - 1 - pad, kw - 1 - pad
    gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else g
    h, wd = xp.shape[1] - 2 * pad, xp.shape[2] - 2 * pad
    cols = np.empty((n, h, wd, kh, kw, o), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = gp[:, kh - 1 - i : kh - 1 - i + h, kw - 1 - j : kw - 1 - j + wd, :]
    wt = w.transpose(0, 1, 3, 2).reshape(kh * kw * o, c)
    dx = (cols.reshape(-1, kh * kw * o) @ wt).reshape(n, h, wd, c)
    return dx, dw, db


def _avgpool2(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"average pooling needs even spatial dims, got {(h, w)}")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _avgpool2_bwd(g):
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2_bwd(g):
    n, h, w, c = g.shape
    return g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# --- reverse-mode tape -------------------------------------------------------


class Var:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    def accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g


class Tape:
    """Records NHWC ops so gradients can be replayed in reverse.

    Parameters
    ----------
    params : dict of str to ndarray
        Named weights, as in :attr:`NetworkParams.arrays`.
    record : bool
        When False, ops run forward only and nothing is kept.
    """

    def __init__(self, params, record=True):
        self.params = params
        self.record = record
        self.grads = {}
        self._ops = []

    def _acc_param(self, key, g):
        self.grads[key] = g if key not in self.grads else self.grads[key] + g

    def conv(self, x, name, pad=None):
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        pad = w.shape[0] // 2 if pad is None else pad
        y, xp = _conv_fwd(x.value, w, b, pad)
        out = Var(y)
        if self.record:

            def back():
                if out.grad is None:
                    return
                dx, dw, db = _conv_bwd(out.grad, xp, w, pad)
                self._acc_param(f"{name}.w", dw)
                self._acc_param(f"{name}.b", db)
                x.accumulate(dx)

            self._ops.append(back)
        return out

    def relu(self, x):
        mask = x.value > 0
        out = Var(x.value * mask)
        if self.record:

            def back():
                if out.grad is not None:
                    x.accumulate(out.grad * mask)

            self._ops.append(back)
        return out

    def avgpool(self, x):
        out = Var(_avgpool2(x.value))
        if self.record:

            def back():
                if out.grad is not None:
                    x.accumulate(_avgpool2_bwd(out.grad))

            self._ops.append(back)
        return out

    def upsample(self, x):
        out = Var(_upsample2(x.value))
        if self.record:

            def back():
                if out.grad is not None:
                    x.accumulate(_upsample2_bwd(out.grad))

            self._ops.append(back)
        return out

    def concat(self, xs):
        out = Var(np.concatenate([x.value for x in xs], axis=-1))
        if self.record:
            bounds = np.cumsum([0] + [x.value.shape[-1] for x in xs])

            def back():
                if out.grad is None:
                    return
                for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                    x.accumulate(out.grad[..., lo:hi])

            self._ops.append(back)
        return out

    def backward(self, out, grad):
        out.grad = grad
        for op in reversed(self._ops):
            op()
        self._ops = []
        return self.grads


# --- network building blocks (tape level) ------------------------------------


def _dense_block(tape, x, prefix, n_convs):
    feats = [x]
    for i in range(n_convs):
        inp = feats[0] if i == 0 else tape.concat(feats)
        feats.append(tape.relu(tape.conv(inp, f"{prefix}.conv{i}")))
    return tape.concat(feats)


def _down(tape, x, name):
    return tape.avgpool(tape.relu(tape.conv(x, name, pad=0)))


def _up(tape, x, skip, name):
    y = tape.relu(tape.conv(tape.upsample(x), name, pad=0))
    return tape.concat([y, skip])


def _network(tape, arch, x):
    h = tape.relu(tape.conv(x, "stem"))
    skips = []
    for s in range(arch.n_stages):
        h = _dense_block(tape, h, f"enc{s}", arch.convs_per_block)
        skips.append(h)
        h = _down(tape, h, f"down{s}")
    h = _dense_block(tape, h, "mid", arch.convs_per_block)
    for s in reversed(range(arch.n_stages)):
        h = _up(tape, h, skips[s], f"up{s}")
        h = _dense_block(tape, h, f"dec{s}", arch.convs_per_block)
    return tape.conv(h, "head", pad=0)


def _check_input(arch, x):
    if x.ndim != 4:
        raise ShapeError(f"expected a (batch, channels, height, width) tensor, got shape {x.shape}")
    if x.shape[1] != arch.in_channels:
        raise ShapeError(f"network expects {arch.in_channels} input channels, got {x.shape[1]}")
    step = 2**arch.n_stages
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {step}")


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_logits(net, x, record=False):
    """Run the network on an NCHW batch; return NHWC logits and the tape."""
    x = np.asarray(x)
    _check_input(net.arch, x)
    tape = Tape(net.arrays, record=record)
    xv = Var(np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=net.dtype))
    return _network(tape, net.arch, xv), tape


def forward(net, x):
    """Per-pixel probabilities of shape ``(batch, out_channels, H, W)``."""
    logits, _ = forward_logits(net, x)
    return sigmoid(logits.value).transpose(0, 3, 1, 2)


# --- NCHW single-op API ------------------------------------------------------


def _nchw_to_nhwc(x):
    return np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))


def conv2d(x, w, b, pad=1):
    """Cross-correlation of an NCHW tensor with ``(out, in, kh, kw)`` kernels."""
    x, w = np.asarray(x), np.asarray(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"incompatible input {x.shape} and kernel {w.shape}")
    y, _ = _conv_fwd(_nchw_to_nhwc(x), w.transpose(2, 3, 1, 0), np.asarray(b), pad)
    return y.transpose(0, 3, 1, 2)


def conv2d_backward(grad_out, x, w, pad=1):
    """Gradients ``(dx, dw, db)`` of :func:`conv2d` for an upstream cotangent."""
    x, w = np.asarray(x), np.asarray(w)
    wk = w.transpose(2, 3, 1, 0)
    xh = _nchw_to_nhwc(x)
    xp = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xh
    g = _nchw_to_nhwc(grad_out)
    if g.shape[-1] != w.shape[0]:
        raise ShapeError("upstream gradient has the wrong channel count")
    dx, dw, db = _conv_bwd(g, xp, wk, pad)
    return dx.transpose(0, 3, 1, 2), dw.transpose(3, 2, 0, 1), db


def _run_single(build, x, params, grad_out=None):
    tape = Tape(params, record=grad_out is not None)
    xv = Var(_nchw_to_nhwc(x))
    out = build(tape, xv)
    y = out.value.transpose(0, 3, 1, 2)
    if grad_out is None:
        return y
    grads = tape.backward(out, _nchw_to_nhwc(grad_out))
    dx = np.zeros_like(xv.value) if xv.grad is None else xv.grad
    return y, dx.transpose(0, 3, 1, 2), grads


def dense_block(x, params, prefix="block", n_convs=4, grad_out=None):
    """Apply one dense block to an NCHW tensor.

    ``params`` holds ``"<prefix>.conv<i>.w"`` kernels in ``(kh, kw, in, out)``
    layout and matching biases. With ``grad_out`` given, also returns the
    input gradient and the parameter gradients.
    """
    if x.shape[1] != params[f"{prefix}.conv0.w"].shape[2]:
        raise ShapeError(f"dense block expects {params[f'{prefix}.conv0.w'].shape[2]} channels, got {x.shape[1]}")
    return _run_single(lambda t, v: _dense_block(t, v, prefix, n_convs), x, params, grad_out)


def transition_down(x, params, name="down", grad_out=None):
    """1x1 conv + ReLU to the compressed width, then 2x2 average pooling."""
    return _run_single(lambda t, v: _down(t, v, name), x, params, grad_out)


def transition_up(x, skip, params, name="up"):
    """Nearest x2 upsampling + 1x1 conv + ReLU, concatenated with ``skip``."""
    x, skip = np.asarray(x), np.asarray(skip)
    if skip.shape[2] != 2 * x.shape[2] or skip.shape[3] != 2 * x.shape[3] or skip.shape[0] != x.shape[0]:
        raise ShapeError(f"skip {skip.shape} must be twice the spatial size of {x.shape}")
    tape = Tape(params, record=False)
    out = _up(tape, Var(_nchw_to_nhwc(x)), Var(_nchw_to_nhwc(skip)), name)
    return out.value.transpose(0, 3, 1, 2)


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, net, step=0, rng_state=None, extra=None):
    """Write ``path`` (f32le payload) and ``path.json`` (header)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "zoneforge-checkpoint",
        "arch": net.arch.to_dict(),
        "step": int(step),
        "rng": rng_state.state_dict() if isinstance(rng_state, RngState) else rng_state,
        "dtype": "f32le",
        "layout": [[k, list(v.shape)] for k, v in net.arrays.items()],
    }
    if extra:
        header["extra"] = extra
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in net.arrays.values())
    path.write_bytes(payload)
    with open(path.with_name(path.name + ".json"), "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Return ``(NetworkParams, header)`` from a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    try:
        with open(path.with_name(path.name + ".json"), encoding="utf-8") as fh:
            header = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing checkpoint header for {path}") from None
    arch = ArchConfig(**header["arch"])
    payload = np.frombuffer(path.read_bytes(), dtype="<f4")
    arrays, offset = {}, 0
    for key, shape in header["layout"]:
        n = int(np.prod(shape))
        if offset + n > payload.size:
            raise FormatError(f"{path}: payload too short for {key}")
        arrays[key] = payload[offset : offset + n].reshape(shape).astype(np.float32)
        offset += n
    if offset != payload.size:
        raise FormatError(f"{path}: {payload.size - offset} trailing payload values")
    return NetworkParams(arch, arrays), header
