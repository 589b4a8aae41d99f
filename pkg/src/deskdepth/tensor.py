"""Dense float64 tensors with a deterministic reverse-mode differentiation tape.

Every value in the pipeline lives in a Tensor. Tensors are immutable after
creation; gradients are tracked on an explicit Tape that records operations
in execution order and replays them backwards. One training step owns one
tape. Ops on tensors that do not require gradients skip recording entirely,
so the same code paths serve both training and plain evaluation.
"""

import struct

import numpy as np


class ShapeMismatch(Exception):
    pass


class DomainError(Exception):
    pass


class InvalidAxis(Exception):
    pass


class NonScalarLoss(Exception):
    pass


class TapeConsumed(Exception):
    pass


class NonIntegralOutputSize(Exception):
    pass


class Tensor:
    """A dense float64 array, optionally attached to a differentiation tape.

    `data` is the row-major value buffer (never mutate it), `node_id` the
    handle used by the owning tape's gradient buffers. Tensors built from
    plain arrays have no tape and behave as constants.
    """

    __slots__ = ("data", "tape", "node_id", "requires_grad")

    def __init__(self, data, tape=None, node_id=None, requires_grad=False):
        self.data = data
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = " grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{tag})"

    # Arithmetic sugar; scalars and arrays lift to constants.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)


def _as_array(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr  # ascontiguousarray would promote 0-d to shape (1,)
    return np.ascontiguousarray(arr)


def constant(values):
    """Wrap values in a tape-free constant tensor."""
    if isinstance(values, Tensor):
        return values
    return Tensor(_as_array(values))


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(_as_array(x))


class Tape:
    """Ordered record of differentiable operations plus gradient buffers.

    Records are appended in execution order, which is a topological order by
    construction: an op's inputs always exist before the op runs. backward()
    walks the records once in reverse, so accumulation order is fixed and two
    identical runs produce bit-identical gradients.
    """

    def __init__(self):
        self._records = []  # (out_id, input_ids, backward_fn)
        self._grads = {}
        self._leaf_shapes = {}
        self._next_id = 0
        self._consumed = False

    def _take_id(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, values, requires_grad=True):
        """Create a leaf tensor owned by this tape."""
        arr = _as_array(values)
        if not requires_grad:
            return Tensor(arr)
        nid = self._take_id()
        self._leaf_shapes[nid] = arr.shape
        return Tensor(arr, tape=self, node_id=nid, requires_grad=True)

    def backward(self, loss):
        """Accumulate gradients of a scalar loss into this tape's buffers.

        Returns the gradient buffers keyed by node_id. Every leaf receives a
        buffer (zeros if the loss does not depend on it). A tape can run
        backward exactly once; build a fresh tape for the next step.
        """
        if self._consumed:
            raise TapeConsumed("backward() already ran on this tape")
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise NonScalarLoss("loss is not a tensor recorded on this tape")
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must have a single element, got shape {loss.shape}")
        self._consumed = True
        grads = self._grads
        grads[loss.node_id] = np.ones_like(loss.data)
        for out_id, input_ids, backward_fn in reversed(self._records):
            gout = grads.get(out_id)
            if gout is None:
                continue
            contribs = backward_fn(gout)
            for nid, contrib in zip(input_ids, contribs):
                if nid is None or contrib is None:
                    continue
                acc = grads.get(nid)
                if acc is None:
                    grads[nid] = contrib
                else:
                    grads[nid] = acc + contrib
        for nid, shape in self._leaf_shapes.items():
            if nid not in grads:
                grads[nid] = np.zeros(shape)
        return grads

    def grad(self, tensor):
        """Gradient buffer for a tensor after backward(); None if absent."""
        if tensor.node_id is None:
            return None
        return self._grads.get(tensor.node_id)


def _resolve_tape(inputs):
    tape = None
    for t in inputs:
        if t.requires_grad:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("inputs belong to different tapes")
    return tape


def _emit(op_name, inputs, value, backward_fn):
    """Finish an op: finiteness check, optional tape record, output tensor."""
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{op_name} produced non-finite values")
    tape = _resolve_tape(inputs)
    if tape is None:
        return Tensor(value)
    nid = tape._take_id()
    input_ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
    tape._records.append((nid, input_ids, backward_fn))
    return Tensor(value, tape=tape, node_id=nid, requires_grad=True)


# ---------------------------------------------------------------------------
# broadcasting (trailing-dimension rule, numpy semantics)

def _broadcast_shape(sa, sb, op_name):
    out = []
    for da, db in zip(reversed(sa), reversed(sb)):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeMismatch(f"{op_name}: shapes {sa} and {sb} do not broadcast")
    longer = sa if len(sa) > len(sb) else sb
    out.extend(reversed(longer[: abs(len(sa) - len(sb))]))
    return tuple(reversed(out))


def _unbroadcast(g, shape):
    """Sum a gradient back down to the pre-broadcast shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", [a, b], a.data + b.data, backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit("sub", [a, b], a.data - b.data, backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    da, db = a.data, b.data

    def backward(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return _emit("mul", [a, b], da * db, backward)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor contains zero")
    da, db = a.data, b.data
    val = da / db

    def backward(g):
        ga = g / db
        gb = -g * da / (db * db)
        return _unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape)

    return _emit("div", [a, b], val, backward)


def neg(a):
    a = _lift(a)

    def backward(g):
        return (-g,)

    return _emit("neg", [a], -a.data, backward)


def abs_(a):
    a = _lift(a)
    sign = np.sign(a.data)

    def backward(g):
        return (g * sign,)

    return _emit("abs", [a], np.abs(a.data), backward)


def exp(a):
    a = _lift(a)
    with np.errstate(over="ignore"):
        val = np.exp(a.data)

    def backward(g):
        return (g * val,)

    return _emit("exp", [a], val, backward)


def log(a):
    a = _lift(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    da = a.data

    def backward(g):
        return (g / da,)

    return _emit("log", [a], np.log(da), backward)


def pow_scalar(a, exponent):
    a = _lift(a)
    c = float(exponent)
    da = a.data
    with np.errstate(invalid="ignore", divide="ignore"):
        val = da ** c
    if not np.all(np.isfinite(val)):
        raise DomainError(f"pow_scalar: base out of domain for exponent {c}")

    def backward(g):
        return (g * c * da ** (c - 1.0),)

    return _emit("pow_scalar", [a], val, backward)


def sin(a):
    a = _lift(a)
    cos_val = np.cos(a.data)

    def backward(g):
        return (g * cos_val,)

    return _emit("sin", [a], np.sin(a.data), backward)


def cos(a):
    a = _lift(a)
    sin_val = np.sin(a.data)

    def backward(g):
        return (-g * sin_val,)

    return _emit("cos", [a], np.cos(a.data), backward)


def minimum(a, b):
    """Elementwise min; on ties the gradient routes to the first operand."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "min")
    da, db = a.data, b.data
    take_a = da <= db

    def backward(g):
        ga = np.where(take_a, g, 0.0)
        gb = np.where(take_a, 0.0, g)
        return _unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape)

    return _emit("min", [a, b], np.minimum(da, db), backward)


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first operand."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "max")
    da, db = a.data, b.data
    take_a = da >= db

    def backward(g):
        ga = np.where(take_a, g, 0.0)
        gb = np.where(take_a, 0.0, g)
        return _unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape)

    return _emit("max", [a, b], np.maximum(da, db), backward)


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes inside the closed interval."""
    a = _lift(a)
    lo_v = -np.inf if lo is None else float(lo)
    hi_v = np.inf if hi is None else float(hi)
    da = a.data
    inside = (da >= lo_v) & (da <= hi_v)

    def backward(g):
        return (np.where(inside, g, 0.0),)

    return _emit("clamp", [a], np.clip(da, lo_v, hi_v), backward)


_UNARY_ELEMENTWISE = {
    "neg": neg,
    "abs": abs_,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
}

_BINARY_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "min": minimum,
    "max": maximum,
}


def elementwise(op_kind, a, b=None, **kwargs):
    """Dispatch on op_kind; the named functions are the primary API."""
    if op_kind in _UNARY_ELEMENTWISE:
        return _UNARY_ELEMENTWISE[op_kind](a)
    if op_kind in _BINARY_ELEMENTWISE:
        if b is None:
            raise ValueError(f"elementwise('{op_kind}') needs two operands")
        return _BINARY_ELEMENTWISE[op_kind](a, b)
    if op_kind == "pow_scalar":
        return pow_scalar(a, kwargs.get("exponent", b))
    if op_kind == "clamp":
        return clamp(a, kwargs.get("lo"), kwargs.get("hi"))
    raise ValueError(f"unknown elementwise kind '{op_kind}'")


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions {a.shape} x {b.shape} disagree")
    da, db = a.data, b.data

    def backward(g):
        return g @ db.T, da.T @ g

    return _emit("matmul", [a, b], da @ db, backward)


# ---------------------------------------------------------------------------
# conv2d (cross-correlation, single image, square odd kernel)

_COL_INDEX_CACHE = {}


def _col_indices(c_in, h, w, k, stride, padding):
    """Flat indices into the zero-padded input for each im2col column entry.

    Shape (c_in*k*k, h_out*w_out); cached per geometry."""
    key = (c_in, h, w, k, stride, padding)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * padding, w + 2 * padding
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    c_idx = np.repeat(np.arange(c_in), k * k)
    ky, kx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    ky = np.tile(ky.ravel(), c_in)
    kx = np.tile(kx.ravel(), c_in)
    oy, ox = np.meshgrid(np.arange(h_out) * stride, np.arange(w_out) * stride, indexing="ij")
    rows = ky[:, None] + oy.ravel()[None, :]
    cols = kx[:, None] + ox.ravel()[None, :]
    flat = (c_idx[:, None] * hp + rows) * wp + cols
    _COL_INDEX_CACHE[key] = (flat, hp, wp, h_out, w_out)
    return _COL_INDEX_CACHE[key]


def conv2d(inp, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of [C_in,H,W] with [C_out,C_in,k,k] weights."""
    inp, weight = _lift(inp), _lift(weight)
    if bias is not None:
        bias = _lift(bias)
    if inp.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeMismatch(
            f"conv2d expects [C,H,W] input and [O,C,k,k] weight, got {inp.shape}, {weight.shape}")
    c_in, h, w = inp.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeMismatch(f"conv2d: input has {c_in} channels, weight expects {wc_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if padding < 0:
        raise ShapeMismatch("conv2d: padding must be non-negative")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    k = kh
    if (h + 2 * padding - k) % stride != 0 or (w + 2 * padding - k) % stride != 0:
        raise NonIntegralOutputSize(
            f"conv2d: extent {h}x{w} with k={k} stride={stride} pad={padding} "
            "gives a non-integral output size")

    flat_idx, hp, wp, h_out, w_out = _col_indices(c_in, h, w, k, stride, padding)
    padded = np.zeros((c_in, hp, wp))
    padded[:, padding:padding + h, padding:padding + w] = inp.data
    cols = padded.reshape(-1)[flat_idx]                      # (C*k*k, H'*W')
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    val = out.reshape(c_out, h_out, w_out)

    has_bias = bias is not None

    def backward(g):
        g2 = g.reshape(c_out, h_out * w_out)
        gw = (g2 @ cols.T).reshape(c_out, c_in, k, k)
        gcols = w2.T @ g2
        gpad = np.bincount(flat_idx.ravel(), weights=gcols.ravel(), minlength=c_in * hp * wp)
        gin = gpad.reshape(c_in, hp, wp)[:, padding:padding + h, padding:padding + w]
        gb = g2.sum(axis=1) if has_bias else None
        if has_bias:
            return np.ascontiguousarray(gin), gw, gb
        return np.ascontiguousarray(gin), gw

    inputs = [inp, weight] if bias is None else [inp, weight, bias]
    return _emit("conv2d", inputs, val, backward)


# ---------------------------------------------------------------------------
# softmax

def _check_axis(axis, ndim, op_name):
    if not isinstance(axis, int) or not (-ndim <= axis < ndim):
        raise InvalidAxis(f"{op_name}: axis {axis} invalid for rank {ndim}")
    return axis % ndim


def softmax(x, axis):
    """Numerically stabilized softmax along one axis."""
    x = _lift(x)
    ax = _check_axis(axis, x.data.ndim, "softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * val).sum(axis=ax, keepdims=True)
        return ((g - dot) * val,)

    return _emit("softmax", [x], val, backward)


# ---------------------------------------------------------------------------
# bilinear grid sampling

_GRID_SNAP = 1e-9  # pull near-lattice coordinates onto the lattice so
                   # identity grids reproduce the image bit-exactly


def _sample_axis(gn, extent):
    """Normalized [-1,1] coords -> pixel coords, snapped and border-clamped."""
    x = (gn + 1.0) * (0.5 * (extent - 1))
    xr = np.rint(x)
    x = np.where(np.abs(x - xr) < _GRID_SNAP, xr, x)
    inside = (x >= 0.0) & (x <= extent - 1.0)
    xc = np.clip(x, 0.0, extent - 1.0)
    x0 = np.minimum(np.floor(xc), extent - 2 if extent > 1 else 0).astype(np.int64)
    frac = xc - x0
    return xc, x0, frac, inside


def grid_sample_bilinear(image, grid):
    """Sample [C,H,W] image at normalized grid [2,Hg,Wg] (row 0 = x, row 1 = y).

    -1 maps to pixel center 0 and +1 to pixel center (W-1) (resp. H-1).
    Out-of-range samples clamp to the border; the returned validity mask is a
    constant tensor with 1.0 where the sample landed inside the image.
    Differentiable w.r.t. both the image values and the grid coordinates.
    """
    image, grid = _lift(image), _lift(grid)
    if image.data.ndim != 3:
        raise ShapeMismatch(f"grid_sample expects [C,H,W] image, got {image.shape}")
    if grid.data.ndim != 3 or grid.shape[0] != 2:
        raise ShapeMismatch(f"grid_sample expects [2,Hg,Wg] grid, got {grid.shape}")
    c, h, w = image.shape
    _, x0, fx, in_x = _sample_axis(grid.data[0], w)
    _, y0, fy, in_y = _sample_axis(grid.data[1], h)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    img = image.data
    ia = img[:, y0, x0]
    ib = img[:, y0, x1]
    ic = img[:, y1, x0]
    id_ = img[:, y1, x1]
    wa = (1.0 - fy) * (1.0 - fx)
    wb = (1.0 - fy) * fx
    wc = fy * (1.0 - fx)
    wd = fy * fx
    val = wa * ia + wb * ib + wc * ic + wd * id_
    valid = Tensor((in_x & in_y).astype(np.float64))

    hg, wg = grid.shape[1], grid.shape[2]

    def backward(g):
        flat = np.zeros(c * h * w)
        base = np.arange(c)[:, None, None] * (h * w)
        for yy, xx, ww in ((y0, x0, wa), (y0, x1, wb), (y1, x0, wc), (y1, x1, wd)):
            idx = (base + yy * w + xx).ravel()
            flat += np.bincount(idx, weights=(g * ww).ravel(), minlength=c * h * w)
        gimg = flat.reshape(c, h, w)

        dval_dx = (1.0 - fy) * (ib - ia) + fy * (id_ - ic)
        dval_dy = (1.0 - fx) * (ic - ia) + fx * (id_ - ib)
        gx = (g * dval_dx).sum(axis=0) * in_x * (0.5 * (w - 1))
        gy = (g * dval_dy).sum(axis=0) * in_y * (0.5 * (h - 1))
        ggrid = np.stack([gx, gy]).reshape(2, hg, wg)
        return gimg, ggrid

    return _emit("grid_sample", [image, grid], val, backward), valid


# ---------------------------------------------------------------------------
# reductions

def _check_axes(axes, ndim, op_name):
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(_check_axis(a, ndim, op_name) for a in axes)
    if len(set(axes)) != len(axes):
        raise InvalidAxis(f"{op_name}: duplicated axes {axes}")
    return axes


def reduce_sum(x, axes=None):
    x = _lift(x)
    shape = x.shape
    if axes is None:
        axes = tuple(range(x.data.ndim))
    axes = _check_axes(axes, x.data.ndim, "sum")

    def backward(g):
        ge = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(ge, shape).copy(),)

    return _emit("sum", [x], x.data.sum(axis=axes), backward)


def reduce_mean(x, axes=None):
    x = _lift(x)
    shape = x.shape
    if axes is None:
        axes = tuple(range(x.data.ndim))
    axes = _check_axes(axes, x.data.ndim, "mean")
    count = 1
    for a in axes:
        count *= shape[a]

    def backward(g):
        ge = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(ge, shape) / count,)

    return _emit("mean", [x], x.data.mean(axis=axes), backward)


def reduce_min(x, axis):
    """Min over one axis; gradient flows only to the argmin element, ties
    broken toward the lowest index."""
    x = _lift(x)
    ax = _check_axis(axis, x.data.ndim, "min_over_axis")
    arg = np.argmin(x.data, axis=ax)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (out,)

    return _emit("min_over_axis", [x], x.data.min(axis=ax), backward)


def reduce(kind, x, axes=None):
    if kind == "sum":
        return reduce_sum(x, axes)
    if kind == "mean":
        return reduce_mean(x, axes)
    if kind == "min_over_axis":
        if not isinstance(axes, int):
            raise InvalidAxis("min_over_axis reduces exactly one axis")
        return reduce_min(x, axes)
    raise ValueError(f"unknown reduce kind '{kind}'")


# ---------------------------------------------------------------------------
# activations

def elu(x):
    x = _lift(x)
    pos = x.data > 0.0
    val = np.where(pos, x.data, np.expm1(x.data))

    def backward(g):
        return (g * np.where(pos, 1.0, val + 1.0),)

    return _emit("elu", [x], val, backward)


def sigmoid(x):
    x = _lift(x)
    d = x.data
    val = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        return (g * val * (1.0 - val),)

    return _emit("sigmoid", [x], val, backward)


def relu(x):
    x = _lift(x)
    pos = x.data > 0.0

    def backward(g):
        return (g * pos,)

    return _emit("relu", [x], np.maximum(x.data, 0.0), backward)


_ACTIVATIONS = {"elu": elu, "sigmoid": sigmoid, "relu": relu}


def activation(kind, x):
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation '{kind}'")
    return _ACTIVATIONS[kind](x)


# ---------------------------------------------------------------------------
# shape plumbing

def concat(tensors, axis):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of an empty list")
    ndim = tensors[0].data.ndim
    ax = _check_axis(axis, ndim, "concat")
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise ShapeMismatch("concat: rank mismatch")
        for i in range(ndim):
            if i != ax and t.shape[i] != tensors[0].shape[i]:
                raise ShapeMismatch(
                    f"concat: shapes {tensors[0].shape} vs {t.shape} differ off-axis")
    extents = [t.shape[ax] for t in tensors]
    splits = np.cumsum(extents)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=ax), backward)


def reshape(x, shape):
    x = _lift(x)
    old = x.shape
    val = x.data.reshape(shape)

    def backward(g):
        return (np.ascontiguousarray(g).reshape(old),)

    return _emit("reshape", [x], np.ascontiguousarray(val), backward)


def moveaxis(x, src, dst):
    x = _lift(x)

    def backward(g):
        return (np.ascontiguousarray(np.moveaxis(g, dst, src)),)

    return _emit("moveaxis", [x], np.ascontiguousarray(np.moveaxis(x.data, src, dst)), backward)


def transpose2d(x):
    return moveaxis(x, 0, 1)


def slice_axis(x, axis, start, stop):
    """Contiguous slice [start:stop) along one axis."""
    x = _lift(x)
    ax = _check_axis(axis, x.data.ndim, "slice_axis")
    extent = x.shape[ax]
    if not (0 <= start < stop <= extent):
        raise ShapeMismatch(f"slice_axis: [{start}:{stop}) out of range for extent {extent}")
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(x.data.ndim))
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _emit("slice_axis", [x], np.ascontiguousarray(x.data[idx]), backward)


# ---------------------------------------------------------------------------
# bilinear upsampling

_UPSAMPLE_CACHE = {}


def _upsample_matrix(n_in, factor):
    """Dense [n_in*factor, n_in] interpolation matrix, boundary-center aligned."""
    key = (n_in, factor)
    if key in _UPSAMPLE_CACHE:
        return _UPSAMPLE_CACHE[key]
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.minimum(src.astype(np.int64), n_in - 2)
        frac = src - i0
        m[np.arange(n_out), i0] = 1.0 - frac
        m[np.arange(n_out), i0 + 1] += frac
    _UPSAMPLE_CACHE[key] = m
    return m


def upsample_bilinear(x, factor):
    """Upsample [C,H,W] by an integer factor with the grid_sample convention."""
    x = _lift(x)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"upsample expects [C,H,W], got {x.shape}")
    if not isinstance(factor, int) or factor < 1:
        raise ShapeMismatch(f"upsample factor must be a positive integer, got {factor}")
    c, h, w = x.shape
    mh = _upsample_matrix(h, factor)
    mw = _upsample_matrix(w, factor)
    val = np.einsum("oh,chw,vw->cov", mh, x.data, mw, optimize=True)

    def backward(g):
        return (np.einsum("oh,cov,vw->chw", mh, g, mw, optimize=True),)

    return _emit("upsample", [x], np.ascontiguousarray(val), backward)


# ---------------------------------------------------------------------------
# DTN1 binary tensor format

_DTN_MAGIC = b"DTN1"


def write_dtn(path, array):
    """Write an array as DTN1: magic, u32 rank, u32 extents, float32 payload."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    with open(path, "wb") as f:
        f.write(_DTN_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_dtn(path):
    """Read a DTN1 file back into a float64 array."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _DTN_MAGIC:
        raise IOError(f"{path}: bad magic, not a DTN1 file")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    payload = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    if payload.size != count:
        raise IOError(f"{path}: truncated payload")
    return payload.astype(np.float64).reshape(shape)
