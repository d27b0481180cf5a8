"""Small reverse-mode autodiff over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
that pushes the output gradient back to them. ``backward`` walks the graph
in reverse topological order. Images use HWC layout; conv weights are
``(kh, kw, c_in, c_out)``.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "op", "decision")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, op="", decision=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        # discrete choice made by a piecewise op (relu mask, argmax, indices)
        self.decision = decision

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(x, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=requires_grad)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _checked(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"{op} produced non-finite values")
    return out


def _make(data, parents, backward_fn, op, decision=None) -> Tensor:
    return Tensor(_checked(data, op), tuple(parents), backward_fn, op=op, decision=decision)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b, "add")

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b, "sub")

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b, "mul")

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back, "mul")


def square(x: Tensor) -> Tensor:
    def back(g):
        _accumulate(x, 2.0 * x.data * g)

    return _make(x.data * x.data, (x,), back, "square")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def back(g):
        _accumulate(x, g * out)

    return _make(out, (x,), back, "exp")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), back, "relu", mask)


# -- shape ----------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}") from None

    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(out, (x,), back, "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: shapes {[t.shape for t in tensors]} on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _make(out, tensors, back, "concat")


def gather_rows(t: Tensor, idx) -> Tensor:
    """``t.data[idx]`` along axis 0; ``idx`` may be any integer array."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeMismatch(f"gather_rows: integer indices required, got {idx.dtype}")
    n = t.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")

    def back(g):
        if not t.requires_grad:
            return
        acc = np.zeros(t.shape, dtype=t.dtype)
        np.add.at(acc, idx.reshape(-1), g.reshape((-1,) + t.shape[1:]))
        _accumulate(t, acc)

    return _make(t.data[idx], (t,), back, "gather_rows", idx)


# -- reductions -------------------------------------------------------------------------


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def back(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(gg, x.shape))

    return _make(out, (x,), back, "reduce_sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    out = np.asarray(x.data.mean(axis=axis))

    def back(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(gg / n, x.shape))

    return _make(out, (x,), back, "reduce_mean")


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        acc = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(acc, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(x, acc)

    return _make(out, (x,), back, "reduce_max", arg)


# -- layers ---------------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"dense: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: bias {b.shape} vs weight {w.shape}")
    flat = x.data.reshape(-1, w.shape[0])
    out = flat @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        if w.requires_grad:
            _accumulate(w, flat.T @ g2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(x.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "dense")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D cross-correlation of an (H, W, C) input with (kh, kw, C, O) weights."""
    if x.data.ndim != 3 or w.data.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {w.shape}")
    kh, kw, cin, cout = w.shape
    h, wd, _ = x.shape
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[: (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(ho, wo, cout)

    def back(g):
        g2 = g.reshape(ho * wo, cout)
        if w.requires_grad:
            _accumulate(w, (cols.T @ g2).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(ho, wo, kh, kw, cin)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[i: i + stride * ho: stride, j: j + stride * wo: stride] += dcols[:, :, i, j]
            _accumulate(x, dxp[pad: pad + h, pad: pad + wd])

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "conv2d")


def max_pool(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max pooling on (H, W, C); ragged edges dropped."""
    h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"max_pool: input {x.shape} smaller than window {size}")
    blocks = x.data[: ho * size, : wo * size].reshape(ho, size, wo, size, c)
    blocks = blocks.transpose(0, 2, 4, 1, 3).reshape(ho, wo, c, size * size)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(ho, wo, c, size, size).transpose(0, 3, 1, 4, 2).reshape(ho * size, wo * size, c)
        full = np.zeros(x.shape, dtype=x.dtype)
        full[: ho * size, : wo * size] = gb
        _accumulate(x, full)

    return _make(out, (x,), back, "max_pool", arg)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (..., K) logits against integer labels."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"softmax_xent: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[-1]
    z = logits.data.reshape(-1, k)
    lab = labels.reshape(-1).astype(np.int64)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = -logp[np.arange(n), lab].mean() if n else np.float64(0.0)

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), lab] -= 1.0
        _accumulate(logits, (g * p / max(n, 1)).reshape(logits.shape))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back, "softmax_xent")


# -- backward ---------------------------------------------------------------------------


def backward(loss: Tensor, grad=None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Intermediate gradients are released once propagated; leaf gradients add
    onto whatever is already there, which is how accumulation across tables
    works.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeMismatch(f"backward needs a scalar loss, got {loss.shape}")
        grad = np.ones_like(loss.data)
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for n in order:
        if n.backward_fn is not None:
            n.grad = None
    _accumulate(loss, np.asarray(grad, dtype=loss.dtype))
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            g = _checked(node.grad, f"backward through {node.op}")
            node.grad = None
            node.backward_fn(g)
    for n in order:
        if n.backward_fn is None and n.grad is not None:
            _checked(n.grad, "gradient")


# -- parameters ---------------------------------------------------------------------------


class ParamStore:
    """Ordered named parameters with gradient slots."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, t in self._params.items():
            arr = state[k]
            if arr.shape != t.data.shape:
                raise ShapeMismatch(f"{k}: checkpoint shape {arr.shape} vs model {t.data.shape}")
            t.data = np.array(arr, dtype=self.dtype)
            t.grad = np.zeros_like(t.data)


class Adam:
    """Adam; ``weight_decay`` is decoupled (applied to the weights, scaled by lr)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data = p.data - update.astype(p.data.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam/step": np.array([self.step_count], dtype=np.int64)}
        for k in self.m:
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        if "adam/step" in state:
            self.step_count = int(state["adam/step"][0])
        for key, arr in state.items():
            if key.startswith("adam/m/"):
                self.m[key[7:]] = np.array(arr)
            elif key.startswith("adam/v/"):
                self.v[key[7:]] = np.array(arr)


def adam_step(params: ParamStore, opt: Adam):
    opt.step(params)


# -- checkpoint file ------------------------------------------------------------------------

CKPT_MAGIC = b"TGCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    """Header ``magic, u32 version, u32 count``, then per tensor
    ``u16 name_len, name, u8 dtype, u8 rank, u32 dims..., raw little-endian values``."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {CKPT_VERSION}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} at byte {pos - 2}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(size), dtype=dt).reshape(dims).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return out
