"""Dense float tensors with taped reverse-mode differentiation.

A :class:`Tape` records one forward pass; :meth:`Tape.backward` walks the
recording once in reverse and deposits gradients on every leaf created
through :meth:`Tape.leaf`. Tensors built outside a tape are constants and
never receive gradient. Values are float32 by default; float64 is the
shadow mode used for finite-difference verification and routes the
convolutions to the strict-order reference kernels.

Tensor data is treated as immutable once created. A tape is owned by one
logical thread; concurrent use is safe only with disjoint tapes.
"""

from __future__ import annotations

import numpy as np

from . import kernels

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional float array, optionally recorded on a tape."""

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered recording of one forward pass; supports a single backward."""

    def __init__(self):
        self._entries = []  # (out_id, in_ids, backward_fn)
        self._tensors = {}  # node_id -> Tensor
        self._leaf_ids = []
        self._next_id = 0
        self._consumed = False

    def _register(self, tensor: Tensor) -> int:
        nid = self._next_id
        self._next_id += 1
        tensor.tape = self
        tensor.node_id = nid
        self._tensors[nid] = tensor
        return nid

    def leaf(self, data) -> Tensor:
        """Attach data as a gradient-receiving leaf (parameter or input)."""
        t = Tensor(data)
        self._register(t)
        self._leaf_ids.append(t.node_id)
        return t

    def _record(self, out: Tensor, inputs, backward_fn) -> None:
        out_id = self._register(out)
        in_ids = tuple(t.node_id if isinstance(t, Tensor) and t.tape is self else None for t in inputs)
        self._entries.append((out_id, in_ids, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Reverse-accumulate gradients of a scalar loss over this recording.

        Every leaf ends up with a grad buffer; leaves the loss does not
        reach get zeros. Running backward twice on one recording is an
        error: re-record the forward pass instead.
        """
        if loss.tape is not self:
            raise ValueError("loss tensor is not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran for this tape; re-record the forward pass")
        self._consumed = True

        grads = {loss.node_id: np.ones_like(loss.data)}
        entries = self._entries
        for k in range(len(entries) - 1, -1, -1):
            out_id, in_ids, backward_fn = entries[k]
            entries[k] = None  # release the closure and its captured arrays now
            gout = grads.pop(out_id, None)
            if gout is None:
                continue
            parts = backward_fn(gout)
            del backward_fn, gout
            for in_id, part in zip(in_ids, parts):
                if in_id is None or part is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = part if acc is None else acc + part
        for nid in self._leaf_ids:
            leaf = self._tensors[nid]
            g = grads.get(nid)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.ascontiguousarray(g)
        # Leaf grads now live on the leaf tensors the caller holds. Drop the
        # recording so intermediates free by refcount instead of waiting for
        # the cycle collector (tensors point back at this tape).
        entries.clear()
        self._tensors.clear()


class BoundParams:
    """Named numpy parameter table bound lazily as leaves of one tape.

    With ``tape=None`` the binding is inference-only: parameters become
    constants and no gradients exist.
    """

    def __init__(self, params: dict, tape: Tape | None):
        self.params = params
        self.tape = tape
        self._bound: dict[str, Tensor] = {}

    def get(self, name: str) -> Tensor:
        t = self._bound.get(name)
        if t is None:
            data = self.params.get(name)
            if data is None:
                raise KeyError(f"missing parameter {name!r}; initialize parameters first")
            t = Tensor(data) if self.tape is None else self.tape.leaf(data)
            self._bound[name] = t
        return t

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter name; zeros for parameters the loss never reached."""
        out = {}
        for name, arr in self.params.items():
            t = self._bound.get(name)
            if t is None or t.grad is None:
                out[name] = np.zeros_like(arr)
            else:
                out[name] = t.grad
        return out


def _find_tape(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("inputs recorded on different tapes")
    return tape


def _emit(out_data, inputs, backward_fn) -> Tensor:
    tape = _find_tape(*inputs)
    out = Tensor(out_data)
    if tape is not None:
        tape._record(out, inputs, backward_fn)
    return out


def _check_same_dtype(*tensors):
    dtypes = {t.dtype for t in tensors if isinstance(t, Tensor)}
    if len(dtypes) > 1:
        raise ValueError(f"mixed tensor dtypes {sorted(map(str, dtypes))}; cast explicitly")


def _as_operand(a: Tensor, b):
    """Classify b as ('const', float) | ('scalar', Tensor) | ('tensor', Tensor)."""
    if isinstance(b, Tensor):
        _check_same_dtype(a, b)
        if b.data.size == 1 and b.data.shape != a.data.shape:
            return "scalar", b
        if b.data.shape != a.data.shape:
            raise ValueError(
                f"elementwise shape mismatch: {a.data.shape} vs {b.data.shape}"
            )
        return "tensor", b
    return "const", a.data.dtype.type(b)


def _sum_to_scalar_shape(g: np.ndarray, shape) -> np.ndarray:
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a: Tensor, b) -> Tensor:
    kind, b = _as_operand(a, b)
    if kind == "const":
        return _emit(a.data + b, [a], lambda g: (g,))
    if kind == "scalar":
        out = a.data + b.data.reshape(())
        return _emit(out, [a, b], lambda g: (g, _sum_to_scalar_shape(g, b.data.shape)))
    return _emit(a.data + b.data, [a, b], lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    kind, b = _as_operand(a, b)
    if kind == "const":
        return _emit(a.data - b, [a], lambda g: (g,))
    if kind == "scalar":
        out = a.data - b.data.reshape(())
        return _emit(out, [a, b], lambda g: (g, _sum_to_scalar_shape(-g, b.data.shape)))
    return _emit(a.data - b.data, [a, b], lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    kind, b = _as_operand(a, b)
    if kind == "const":
        return _emit(a.data * b, [a], lambda g: (g * b,))
    if kind == "scalar":
        s = b.data.reshape(())
        return _emit(
            a.data * s,
            [a, b],
            lambda g: (g * s, _sum_to_scalar_shape(g * a.data, b.data.shape)),
        )
    return _emit(a.data * b.data, [a, b], lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, s)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {alpha}")
    gate = x.data >= 0
    a = x.data.dtype.type(alpha)
    out = x.data * a
    np.copyto(out, x.data, where=gate)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        gx = g * g.dtype.type(alpha)
        np.copyto(gx, g, where=gate)
        return (gx,)

    return _emit(out, [x], backward)


def tanh_act(x: Tensor) -> Tensor:
    """Elementwise tanh with output strictly inside (-1, 1).

    Saturated values are clamped to the largest float below 1 so the
    open-interval range contract holds and the backward factor 1 - y*y
    stays nonzero for finite inputs.
    """
    y = np.tanh(x.data)
    lim = np.nextafter(y.dtype.type(1), y.dtype.type(0))
    np.clip(y, -lim, lim, out=y)
    return _emit(y, [x], lambda g: (g * (1.0 - y * y),))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) of NCHW input with OIKhKw weights."""
    _check_same_dtype(x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIKhKw kernel, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {x.data.shape} has {x.data.shape[1]} channels, "
            f"kernel {w.data.shape} expects {w.data.shape[1]}"
        )
    if b.data.shape != (w.data.shape[0],):
        raise ValueError(f"conv2d bias shape {b.data.shape} != ({w.data.shape[0]},)")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    oh = kernels.conv_out_size(x.data.shape[2], w.data.shape[2], stride, pad)
    ow = kernels.conv_out_size(x.data.shape[3], w.data.shape[3], stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d output would be {oh}x{ow} for input {x.data.shape}, "
            f"kernel {w.data.shape}, stride {stride}, pad {pad}"
        )
    out = kernels.conv2d_forward(x.data, w.data, b.data, stride, pad)
    xd, wd = x.data, w.data
    need_gx = x.tape is not None  # constant inputs never receive gradients

    def backward(g):
        return kernels.conv2d_backward(xd, wd, stride, pad, g, need_gx)

    return _emit(out, [x, w, b], backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate each pixel of an NCHW tensor into a 2x2 block."""
    n, c, h, w = x.data.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.data.dtype)
    out.reshape(n, c, h, 2, w, 2)[:] = x.data[:, :, :, None, :, None]

    def backward(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _emit(out, [x], backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    sa, sb = a.data.shape, b.data.shape
    if len(sa) != 4 or len(sb) != 4 or sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ValueError(f"concat_channels needs matching N,H,W: {sa} vs {sb}")
    ca = sa[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit(out, [a, b], lambda g: (g[:, :ca], g[:, ca:]))


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear NCHW resize with half-pixel centers, border-clamped."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be >= 1, got {out_h}x{out_w}")
    h, w = x.data.shape[2], x.data.shape[3]
    mh = kernels.bilinear_matrix(out_h, h, x.data.dtype)
    mw = kernels.bilinear_matrix(out_w, w, x.data.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return _emit(out, [x], backward)


def reduce_mean(x: Tensor) -> Tensor:
    if x.data.size < 1:
        raise ValueError("reduce_mean of an empty tensor")
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    shape = x.data.shape
    return _emit(out, [x], lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over H,W of an NCHW tensor -> (N, C)."""
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _emit(out, [x], backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, [a, b], lambda g: (g @ bd.T, ad.T @ g))


def crop(x: Tensor, row0: int, col0: int, height: int, width: int) -> Tensor:
    """Spatial crop of an NCHW tensor; gradient zero-embeds back."""
    n, c, h, w = x.data.shape
    if not (0 <= row0 and 0 <= col0 and height >= 1 and width >= 1
            and row0 + height <= h and col0 + width <= w):
        raise ValueError(f"crop box ({row0},{col0},{height},{width}) outside {h}x{w} frame")
    out = np.ascontiguousarray(x.data[:, :, row0 : row0 + height, col0 : col0 + width])

    def backward(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, row0 : row0 + height, col0 : col0 + width] = g
        return (gx,)

    return _emit(out, [x], backward)


def where_mask(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel select: mask ? a : b. The boolean mask is a constant."""
    _check_same_dtype(a, b)
    if mask.shape != a.data.shape or a.data.shape != b.data.shape:
        raise ValueError(
            f"where_mask shape mismatch: mask {mask.shape}, a {a.data.shape}, b {b.data.shape}"
        )
    out = np.where(mask, a.data, b.data)

    def backward(g):
        zero = np.zeros((), dtype=g.dtype)
        return (np.where(mask, g, zero), np.where(mask, zero, g))

    return _emit(out, [a, b], backward)


def batch_slice(x: Tensor, index: int) -> Tensor:
    """Select one sample of an NCHW tensor, keeping a batch axis of 1."""
    n = x.data.shape[0]
    if not 0 <= index < n:
        raise ValueError(f"batch_slice index {index} out of range for batch {n}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g[0]
        return (gx,)

    return _emit(np.ascontiguousarray(x.data[index : index + 1]), [x], backward)


def concat_batch(tensors) -> Tensor:
    """Stack same-shaped NCHW tensors along the batch axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_batch of an empty list")
    _check_same_dtype(*tensors)
    sizes = [t.data.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)

    def backward(g):
        parts, at = [], 0
        for s in sizes:
            parts.append(g[at : at + s])
            at += s
        return tuple(parts)

    return _emit(out, tensors, backward)
