"""Small reverse-mode differentiation kernel on top of numpy.

Values are plain ``np.ndarray`` objects.  A :class:`Var` wraps an array that
takes part in a gradient computation; every op accepts either arrays or
``Var`` and only records a tape node when at least one input requires a
gradient, so the same network code doubles as a fast inference path.

Layers used by the networks (affine, GRU step, softmax) are single fused
nodes with hand-derived backward passes.
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import CheckpointError, ConfigError

log = logging.getLogger(__name__)

DTYPE = np.float64


class Var:
    """A node of the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Var, ...] = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        backward(self, grad)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=DTYPE)


def _node(out: np.ndarray, inputs, grad_fns) -> Var | np.ndarray:
    """Record ``out`` on the tape if any input is a Var.

    ``grad_fns`` maps each input position to a function ``g -> dL/d input``.
    """
    parents = []
    fns = []
    for x, fn in zip(inputs, grad_fns):
        if isinstance(x, Var) and fn is not None:
            parents.append(x)
            fns.append(fn)
    if not parents:
        return out

    def backward_fn(g):
        return [fn(g) for fn in fns]

    return Var(out, tuple(parents), backward_fn)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(root: Var, grad=None) -> None:
    """Accumulate ``d root / d leaf`` into ``leaf.grad`` for every reachable Var."""
    if grad is None:
        if root.value.size != 1:
            raise ConfigError("backward() without a seed gradient needs a scalar output")
        grad = np.ones_like(root.value)
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise


def add(a, b):
    av, bv = value(a), value(b)
    return _node(av + bv, (a, b), (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    return _node(av - bv, (a, b), (lambda g: _unbroadcast(g, av.shape), lambda g: -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    return _node(
        av * bv,
        (a, b),
        (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)),
    )


def square(a):
    av = value(a)
    return _node(av * av, (a,), (lambda g: 2.0 * av * g,))


def matmul(a, b):
    """Batched ``a @ b`` with numpy broadcasting on leading axes."""
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ConfigError("matmul needs operands with at least two dimensions")
    if av.shape[-1] != bv.shape[-2]:
        raise ConfigError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    return _node(
        av @ bv,
        (a, b),
        (
            lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape),
            lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape),
        ),
    )


def reduce_sum(a, axis=None, keepdims=False):
    av = value(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _node(out, (a,), (grad,))


def reshape(a, shape):
    av = value(a)
    return _node(av.reshape(shape), (a,), (lambda g: g.reshape(av.shape),))


def take_along(a, idx: np.ndarray, axis: int = -1):
    """``np.take_along_axis`` with a scatter-add backward."""
    av = value(a)
    out = np.take_along_axis(av, idx, axis=axis)

    def grad(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, idx, g, axis=axis)
        return full

    return _node(out, (a,), (grad,))


def select(a, index: int, axis: int = 0):
    """``a`` at one position of ``axis`` (the axis is dropped)."""
    av = value(a)

    def grad(g):
        full = np.zeros_like(av)
        sl = [slice(None)] * av.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return full

    return _node(np.take(av, index, axis=axis), (a,), (grad,))


def narrow(a, start: int, stop: int, axis: int = 0):
    """Slice ``[start:stop]`` along ``axis``."""
    av = value(a)
    sl = [slice(None)] * av.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def grad(g):
        full = np.zeros_like(av)
        full[sl] = g
        return full

    return _node(av[sl], (a,), (grad,))


def concat(xs: Iterable, axis: int = -1):
    xs = list(xs)
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def make(i):
        def grad(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            return g[tuple(sl)]

        return grad

    return _node(out, xs, [make(i) for i in range(len(xs))])


def stack(xs: Iterable, axis: int = 0):
    xs = list(xs)
    out = np.stack([value(x) for x in xs], axis=axis)

    def make(i):
        return lambda g: np.take(g, i, axis=axis)

    return _node(out, xs, [make(i) for i in range(len(xs))])


# ---------------------------------------------------------------- activations


def relu(x):
    xv = value(x)
    mask = xv > 0
    return _node(np.where(mask, xv, 0.0), (x,), (lambda g: g * mask,))


def elu(x):
    xv = value(x)
    neg = np.expm1(np.minimum(xv, 0.0))
    out = np.where(xv > 0, xv, neg)
    return _node(out, (x,), (lambda g: g * np.where(xv > 0, 1.0, neg + 1.0),))


def tanh(x):
    out = np.tanh(value(x))
    return _node(out, (x,), (lambda g: g * (1.0 - out * out),))


def _sigmoid(xv):
    return 0.5 * (1.0 + np.tanh(0.5 * xv))


def sigmoid(x):
    out = _sigmoid(value(x))
    return _node(out, (x,), (lambda g: g * out * (1.0 - out),))


def softmax(x, axis: int = -1):
    xv = value(x)
    e = np.exp(xv - xv.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _node(out, (x,), (grad,))


def absolute(x):
    xv = value(x)
    return _node(np.abs(xv), (x,), (lambda g: g * np.sign(xv),))


ACTIVATIONS: dict[str, Callable] = {
    "relu": relu,
    "elu": elu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
}


def activation(x, kind: str, axis: int = -1):
    if kind not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}")
    if kind == "softmax":
        return softmax(x, axis=axis)
    return ACTIVATIONS[kind](x)


# ---------------------------------------------------------------- layers


def affine_forward(x, W, b):
    """``y = x W^T + b`` over the last axis of ``x``; ``W`` is ``[out, in]``."""
    xv, Wv, bv = value(x), value(W), value(b)
    if Wv.ndim != 2 or bv.shape != (Wv.shape[0],) or xv.shape[-1] != Wv.shape[1]:
        raise ConfigError(f"affine shape mismatch: x{xv.shape} W{Wv.shape} b{bv.shape}")
    out = xv @ Wv.T + bv
    lead = xv.reshape(-1, xv.shape[-1])

    def gW(g):
        return g.reshape(-1, g.shape[-1]).T @ lead

    def gb(g):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _node(out, (x, W, b), (lambda g: g @ Wv, gW, gb))


def gru_step(x, h_prev, W_x, W_h, b_x, b_h):
    """One GRU step, ``h' = (1 - z) * h + z * n``.

    Gate rows of the fused ``[3H, .]`` weights are ordered reset, update,
    candidate.  With ``z -> 0`` the hidden state passes through unchanged.
    """
    xv, hv = value(x), value(h_prev)
    Wx, Wh, bx, bh = value(W_x), value(W_h), value(b_x), value(b_h)
    H = hv.shape[-1]
    if Wh.shape != (3 * H, H) or Wx.shape[0] != 3 * H or bx.shape != (3 * H,) or bh.shape != (3 * H,):
        raise ConfigError(f"GRU hidden-size mismatch: h{hv.shape} W_h{Wh.shape} W_x{Wx.shape}")
    if xv.shape[-1] != Wx.shape[1]:
        raise ConfigError(f"GRU input-size mismatch: x{xv.shape} W_x{Wx.shape}")
    gx = xv @ Wx.T + bx
    gh = hv @ Wh.T + bh
    r = _sigmoid(gx[..., :H] + gh[..., :H])
    z = _sigmoid(gx[..., H : 2 * H] + gh[..., H : 2 * H])
    hn = gh[..., 2 * H :]
    n = np.tanh(gx[..., 2 * H :] + r * hn)
    out = (1.0 - z) * hv + z * n

    cache = {}

    def local(g):
        if "dgx" not in cache:
            dn = g * z
            dz = g * (n - hv)
            dn_pre = dn * (1.0 - n * n)
            dr = dn_pre * hn
            dr_pre = dr * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            cache["dgx"] = np.concatenate([dr_pre, dz_pre, dn_pre], axis=-1)
            cache["dgh"] = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=-1)
        return cache["dgx"], cache["dgh"]

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    def g_x(g):
        return local(g)[0] @ Wx

    def g_h(g):
        return local(g)[1] @ Wh + g * (1.0 - z)

    def g_Wx(g):
        return flat(local(g)[0]).T @ flat(xv)

    def g_Wh(g):
        return flat(local(g)[1]).T @ flat(hv)

    def g_bx(g):
        return flat(local(g)[0]).sum(axis=0)

    def g_bh(g):
        return flat(local(g)[1]).sum(axis=0)

    return _node(out, (x, h_prev, W_x, W_h, b_x, b_h), (g_x, g_h, g_Wx, g_Wh, g_bx, g_bh))


def uniform_init(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


# ---------------------------------------------------------------- parameters


@dataclass
class ParamBlock:
    """Named parameters with matching gradient and Adam moment buffers."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0
    step: int = 0
    _flat: dict | None = field(default=None, repr=False, compare=False)

    def add(self, name: str, array: np.ndarray) -> None:
        arr = np.array(array, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"non-finite values in parameter {name!r}")
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self._flat = None

    def flat(self) -> dict[str, np.ndarray]:
        """Contiguous buffers backing params/grads/m/v; the dict entries become views."""
        if self._flat is None:
            flat = {}
            for attr in ("params", "grads", "m", "v"):
                d = getattr(self, attr)
                buf = np.concatenate([d[k].ravel() for k in d]) if d else np.zeros(0)
                off = 0
                for k in d:
                    n = d[k].size
                    d[k] = buf[off : off + n].reshape(d[k].shape)
                    off += n
                flat[attr] = buf
            self._flat = flat
        return self._flat

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def leaves(self, prefix: str = "") -> dict[str, Var]:
        """Fresh ``Var`` leaves for every parameter under ``prefix``."""
        return {k: Var(v, name=k) for k, v in self.params.items() if k.startswith(prefix)}

    def accumulate(self, leaves: Mapping[str, Var]) -> None:
        for k, leaf in leaves.items():
            if leaf.grad is not None:
                self.grads[k] += leaf.grad

    def zero_grad(self) -> None:
        if self._flat is not None:
            self._flat["grads"].fill(0.0)
            return
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> ParamBlock:
        out = ParamBlock(version=self.version, step=self.step)
        for k in self.params:
            out.params[k] = self.params[k].copy()
            out.grads[k] = self.grads[k].copy()
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        return out

    def frozen(self) -> dict[str, np.ndarray]:
        """Read-only copies of the parameter arrays."""
        out = {}
        for k, arr in self.params.items():
            c = arr.copy()
            c.flags.writeable = False
            out[k] = c
        return out

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            if k not in self.params:
                raise ConfigError(f"unknown parameter {k!r}")
            if self.params[k].shape != arr.shape:
                raise ConfigError(f"shape mismatch for {k!r}: {self.params[k].shape} vs {arr.shape}")
            self.params[k][...] = arr


@dataclass
class Adam:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None


def optimizer_step(block: ParamBlock, lr: float | None = None, opt: Adam | None = None,
                   names: Iterable[str] | None = None) -> bool:
    """Apply one Adam update to ``block`` in place.

    Returns False (parameters untouched, gradients cleared) when any gradient
    is non-finite.  The version counter advances on every call that applies.
    """
    opt = opt or Adam()
    lr = opt.lr if lr is None else lr
    if names is None:
        flat = block.flat()
        p, g, m, v = flat["params"], flat["grads"], flat["m"], flat["v"]
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient; optimizer step skipped")
            block.zero_grad()
            return False
        if opt.clip_norm is not None:
            norm = float(np.sqrt(g @ g))
            if norm > opt.clip_norm:
                g *= opt.clip_norm / norm
        block.step += 1
        _adam(opt, lr, block.step, p, g, m, v)
    else:
        keys = list(names)
        if not all(np.all(np.isfinite(block.grads[k])) for k in keys):
            log.warning("non-finite gradient; optimizer step skipped")
            block.zero_grad()
            return False
        scale = 1.0
        if opt.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(block.grads[k] ** 2)) for k in keys))
            if norm > opt.clip_norm:
                scale = opt.clip_norm / norm
        block.step += 1
        for k in keys:
            _adam(opt, lr, block.step, block.params[k], block.grads[k] * scale, block.m[k], block.v[k])
    block.zero_grad()
    block.version += 1
    return True


def _adam(opt: Adam, lr: float, t: int, p, g, m, v) -> None:
    m *= opt.beta1
    m += (1.0 - opt.beta1) * g
    v *= opt.beta2
    v += (1.0 - opt.beta2) * g * g
    if lr != 0.0:
        p -= lr * (m / (1.0 - opt.beta1**t)) / (np.sqrt(v / (1.0 - opt.beta2**t)) + opt.eps)


def grad_check(f: Callable[[dict[str, Var]], Var], block: ParamBlock, eps: float = 1e-5,
               names: Iterable[str] | None = None, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and finite differences.

    ``f`` builds a scalar loss from a mapping of parameter leaves.  The
    reference derivative is the fourth-order five-point stencil, which keeps
    both truncation (O(eps^4)) and round-off (~1e-16 |f| / eps) far below the
    gradients being checked.  With ``max_entries`` a random subset of
    coordinates per parameter is checked.
    """
    keys = list(block.params) if names is None else list(names)
    leaves = {k: Var(v, name=k) for k, v in block.params.items()}
    loss = f(leaves)
    if not isinstance(loss, Var):
        raise ConfigError("loss does not depend on any parameter")
    loss.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0

    def at(arr, idx, x):
        arr[idx] = x
        return float(value(f(dict(block.params))))

    for k in keys:
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(block.params[k])
        arr = block.params[k]
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = rng.choice(arr.size, size=max_entries, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, arr.shape)
            orig = arr[idx]
            f2p, f1p = at(arr, idx, orig + 2 * eps), at(arr, idx, orig + eps)
            f1m, f2m = at(arr, idx, orig - eps), at(arr, idx, orig - 2 * eps)
            arr[idx] = orig
            fd = (8 * (f1p - f1m) - (f2p - f2m)) / (12 * eps)
            a = float(analytic[idx])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"VDXCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], global_step: int,
                    meta: bytes = b"") -> None:
    """Write ``name -> float64 array`` pairs in a small checksummed container."""
    body = bytearray()
    body += struct.pack("<IQI", CKPT_VERSION, int(global_step), len(meta))
    body += meta
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes(order="C")
    crc = zlib.crc32(bytes(body))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(CKPT_MAGIC + bytes(body) + struct.pack("<I", crc))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], int, bytes]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    if len(data) < len(CKPT_MAGIC) + 4 or not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = data[len(CKPT_MAGIC):-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt checkpoint)")
    try:
        version, step, meta_len = struct.unpack_from("<IQI", body, 0)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {CKPT_VERSION}")
        off = 16
        meta = bytes(body[off : off + meta_len])
        off += meta_len
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(DTYPE)
            off += 8 * n
            tensors[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    return tensors, step, meta
