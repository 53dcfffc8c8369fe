"""Reverse-mode numerical core on numpy arrays.

Each primitive is a forward computation plus a hand-derived vector-Jacobian
product; :class:`Var` only records the call order so backward replays the
VJPs. All math runs in float64. A central-difference checker
(:func:`grad_check`) guards every gradient.
"""

import numpy as np

from .errors import ParameterError

# ---------------------------------------------------------------------------
# tape


class Var:
    """An ndarray node on the backward tape."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def backward(self, seed=None):
        """Accumulate gradients into every reachable parent."""
        if seed is None:
            if self.data.size != 1:
                raise ParameterError("backward() without seed needs a scalar output")
            seed = np.ones_like(self.data)
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
                else:
                    parent.grad = parent.grad + g

    # operator sugar (thin wrappers over module-level primitives)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b):
    a, b = as_var(a), as_var(b)
    out = a.data + b.data
    return Var(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_var(a), as_var(b)
    out = a.data * b.data
    return Var(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Var(out, (a, b), vjp)


def reshape(x, shape):
    x = as_var(x)
    return Var(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_var(x)
    inv = np.argsort(axes)
    return Var(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(parts, axis):
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return Var(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


def getitem(x, key):
    x = as_var(x)

    def vjp(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, key, g)
        return (gx,)

    return Var(x.data[key], (x,), vjp)


def take_along(x, idx, axis):
    """Gather along ``axis`` with an integer index array (not differentiated)."""
    x = as_var(x)
    idx = np.asarray(idx)

    def vjp(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return Var(np.take_along_axis(x.data, idx, axis=axis), (x,), vjp)


def broadcast_to(x, shape):
    x = as_var(x)
    return Var(np.broadcast_to(x.data, shape).copy(), (x,),
               lambda g: (_unbroadcast(g, x.shape),))


def vsum(x, axis=None, keepdims=False):
    x = as_var(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return Var(out, (x,), vjp)


def vmean(x, axis=None, keepdims=False):
    x = as_var(x)
    n = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)]
    )
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def tanh(x):
    x = as_var(x)
    t = np.tanh(x.data)
    return Var(t, (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid(x):
    x = as_var(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return Var(s, (x,), lambda g: (g * s * (1.0 - s),))


def elu(x):
    """elu(x) = x for x >= 0, exp(x) - 1 otherwise."""
    x = as_var(x)
    neg = np.exp(np.minimum(x.data, 0.0)) - 1.0
    out = np.where(x.data >= 0.0, x.data, neg)
    deriv = np.where(x.data >= 0.0, 1.0, neg + 1.0)
    return Var(out, (x,), lambda g: (g * deriv,))


# ---------------------------------------------------------------------------
# softmax / layer norm


def temp_softmax(x, tau, axis=-1):
    """Temperature-scaled softmax along ``axis`` (max-subtracted)."""
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {tau}")
    x = as_var(x)
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot) / tau,)

    return Var(s, (x,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_var(x), as_var(gain), as_var(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return Var(out, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# radix-2 FFT (forward/backward are both expressed through the same core)


def _fft_core(re, im, sign):
    """Iterative radix-2 FFT over the last axis; sign=-1 forward, +1 inverse
    (inverse here is unscaled; callers divide by l)."""
    l = re.shape[-1]
    if l & (l - 1) or l == 0:
        raise ParameterError(f"FFT length must be a power of two, got {l}")
    levels = l.bit_length() - 1
    idx = np.arange(l)
    rev = np.zeros(l, dtype=np.intp)
    for b in range(levels):
        rev |= ((idx >> b) & 1) << (levels - 1 - b)
    re = np.array(re[..., rev], dtype=np.float64)
    im = np.array(im[..., rev], dtype=np.float64)
    size = 2
    while size <= l:
        half = size // 2
        k = np.arange(half)
        ang = sign * 2.0 * np.pi * k / size
        wr, wi = np.cos(ang), np.sin(ang)
        re_blocks = re.reshape(re.shape[:-1] + (l // size, size))
        im_blocks = im.reshape(im.shape[:-1] + (l // size, size))
        er, ei = re_blocks[..., :half], im_blocks[..., :half]
        orr, oi = re_blocks[..., half:], im_blocks[..., half:]
        tr = orr * wr - oi * wi
        ti = orr * wi + oi * wr
        re = np.concatenate([er + tr, er - tr], axis=-1).reshape(re.shape)
        im = np.concatenate([ei + ti, ei - ti], axis=-1).reshape(im.shape)
        size *= 2
    return re, im


def fft_arrays(x):
    """Forward DFT of a real array over its last axis -> (re, im)."""
    x = np.asarray(x, dtype=np.float64)
    return _fft_core(x, np.zeros_like(x), -1.0)


def ifft_arrays(re, im):
    """Real part of the inverse DFT over the last axis."""
    rr, _ = _fft_core(np.asarray(re, dtype=np.float64),
                      np.asarray(im, dtype=np.float64), +1.0)
    return rr / re.shape[-1]


def ifft_imag_residue(re, im):
    """L2 norm of the discarded imaginary part of the inverse transform."""
    _, ii = _fft_core(np.asarray(re, dtype=np.float64),
                      np.asarray(im, dtype=np.float64), +1.0)
    return float(np.linalg.norm(ii / re.shape[-1]))


def fft(x):
    """Differentiable forward DFT of a real Var; returns (re, im) Vars."""
    xv = as_var(x)
    re_d, im_d = fft_arrays(xv.data)
    # d re_k / d x_n = cos(2*pi*n*k/l)  (symmetric)  -> vjp_re(g) = Re(F g)
    # d im_k / d x_n = -sin(2*pi*n*k/l) (symmetric)  -> vjp_im(g) = Im(F g)
    re = Var(re_d, (xv,), lambda g: (fft_arrays(g)[0],))
    im = Var(im_d, (xv,), lambda g: (fft_arrays(g)[1],))
    return re, im


def ifft(re, im):
    """Differentiable real-part inverse DFT of a (re, im) Var pair."""
    re, im = as_var(re), as_var(im)
    out = ifft_arrays(re.data, im.data)
    l = re.shape[-1]

    def vjp(g):
        fr, fi = fft_arrays(g)
        return fr / l, fi / l

    return Var(out, (re, im), vjp)


# ---------------------------------------------------------------------------
# 2-D convolution (NCHW, cross-correlation) and its adjoint


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _conv_out_size(h, kh, stride, pad):
    return (h + 2 * pad - kh) // stride + 1


def _conv_index(h, w, kh, kw, stride, pad):
    (sh, sw), (ph, pw) = _pair(stride), _pair(pad)
    ho = _conv_out_size(h, kh, sh, ph)
    wo = _conv_out_size(w, kw, sw, pw)
    i0 = sh * np.repeat(np.arange(ho), wo)
    j0 = sw * np.tile(np.arange(wo), ho)
    di = np.repeat(np.arange(kh), kw)
    dj = np.tile(np.arange(kw), kh)
    rows = i0[None, :] + di[:, None]          # (kh*kw, ho*wo)
    cols = j0[None, :] + dj[:, None]
    return rows, cols, ho, wo, ph, pw


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    rows, cols, ho, wo, ph, pw = _conv_index(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    patches = xp[:, :, rows, cols]            # (b, c, kh*kw, ho*wo)
    return patches.reshape(b, c * kh * kw, ho * wo), (ho, wo)


def _col2im(cols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    rows, colsx, ho, wo, ph, pw = _conv_index(h, w, kh, kw, stride, pad)
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw))
    cols = cols.reshape(b, c, kh * kw, ho * wo)
    np.add.at(xp, (slice(None), slice(None), rows, colsx), cols)
    return xp[:, :, ph:h + ph, pw:w + pw]


def _pair_contract(a, b):
    """sum_b a[b] @ b[b].T for (batch, m, l) x (batch, n, l) -> (m, n)."""
    m, n = a.shape[1], b.shape[1]
    af = a.transpose(1, 0, 2).reshape(m, -1)
    bf = b.transpose(1, 0, 2).reshape(n, -1)
    return af @ bf.T


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation, NCHW input, kernel (c_out, c_in, kh, kw)."""
    x, kernel = as_var(x), as_var(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ParameterError("conv2d expects 4-D input and kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ParameterError(
            f"conv2d channel mismatch: input {x.shape[1]}, kernel {kernel.shape[1]}"
        )
    b = x.shape[0]
    co, ci, kh, kw = kernel.shape
    cols, (ho, wo) = _im2col(x.data, kh, kw, stride, padding)
    w2 = kernel.data.reshape(co, ci * kh * kw)
    out = (w2 @ cols).reshape(b, co, ho, wo)

    def vjp(g):
        g2 = g.reshape(b, co, ho * wo)
        gk = _pair_contract(g2, cols).reshape(kernel.shape)
        gcols = np.matmul(w2.T, g2)
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        return gx, gk

    return Var(out, (x, kernel), vjp)


def transpose_conv2d(y, kernel, stride=1, padding=0):
    """Exact adjoint of :func:`conv2d` with the same kernel: maps the
    conv output space (c_out channels) back to the input space (c_in)."""
    y, kernel = as_var(y), as_var(kernel)
    if y.data.ndim != 4 or kernel.data.ndim != 4:
        raise ParameterError("transpose_conv2d expects 4-D input and kernel")
    if y.shape[1] != kernel.shape[0]:
        raise ParameterError(
            f"transpose_conv2d channel mismatch: input {y.shape[1]}, kernel {kernel.shape[0]}"
        )
    b, co, ho, wo = y.shape
    _, ci, kh, kw = kernel.shape
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    h = sh * (ho - 1) + kh - 2 * ph
    w = sw * (wo - 1) + kw - 2 * pw
    w2 = kernel.data.reshape(co, ci * kh * kw)
    y2 = y.data.reshape(b, co, ho * wo)
    cols = np.matmul(w2.T, y2)
    out = _col2im(cols, (b, ci, h, w), kh, kw, stride, padding)

    def vjp(g):
        gcols, _ = _im2col(g, kh, kw, stride, padding)
        gy = np.matmul(w2, gcols).reshape(y.shape)
        gk = _pair_contract(y2, gcols).reshape(kernel.shape)
        return gy, gk

    return Var(out, (y, kernel), vjp)


# ---------------------------------------------------------------------------
# overlap-add (linear scatter of windows back onto a time axis)


def overlap_add(grid, stride, n_out):
    """Scatter windows (..., n_p, l) onto a length-``n_out`` axis by addition."""
    grid = as_var(grid)
    n_p, l = grid.shape[-2], grid.shape[-1]
    if stride * (n_p - 1) + l > n_out:
        raise ParameterError("overlap_add: windows overrun the output axis")
    starts = stride * np.arange(n_p)
    pos = starts[:, None] + np.arange(l)[None, :]       # (n_p, l)
    out = np.zeros(grid.shape[:-2] + (n_out,))
    np.add.at(out, (..., pos.ravel()),
              grid.data.reshape(grid.shape[:-2] + (n_p * l,)))

    def vjp(g):
        return (g[..., pos],)

    return Var(out, (grid,), vjp)


# ---------------------------------------------------------------------------
# gradient checker


def grad_check(f, inputs, h=1e-5, max_coords_per_input=None, seed=0):
    """Compare analytic gradients of scalar-valued ``f`` against central
    finite differences; returns the max relative discrepancy.

    ``inputs`` is a list of ndarrays; ``f`` receives matching Vars. When
    ``max_coords_per_input`` is set, a seeded random subset of coordinates
    is probed per input (for large compositions).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    base = [np.asarray(x, dtype=np.float64).copy() for x in inputs]
    vars_ = [Var(x) for x in base]
    out = f(*vars_)
    out.backward()

    def eval_at(xs):
        return float(f(*[Var(x) for x in xs]).data)

    worst = 0.0
    for i, x in enumerate(base):
        analytic = vars_[i].grad
        if analytic is None:
            analytic = np.zeros_like(x)
        coords = list(np.ndindex(x.shape)) if x.shape else [()]
        if max_coords_per_input is not None and len(coords) > max_coords_per_input:
            pick = rng.choice(len(coords), size=max_coords_per_input, replace=False)
            coords = [coords[j] for j in pick]
        for c in coords:
            xs = [b.copy() for b in base]
            xs[i][c] += h
            fp = eval_at(xs)
            xs[i][c] -= 2.0 * h
            fm = eval_at(xs)
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[c]) if x.shape else float(analytic)
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
