"""Composite differentiable layers built from the autodiff primitives:
linear/MLP, scaled dot-product attention, and (bi)directional GRU with
backprop-through-time supplied by the tape."""

import numpy as np

from . import autodiff as ad
from .errors import ParameterError


def linear(x, weight, bias=None):
    """x (..., d_in) @ weight (d_out, d_in)^T + bias."""
    x, weight = ad.as_var(x), ad.as_var(weight)
    out = ad.matmul(x, ad.transpose(weight, (1, 0)))
    if bias is not None:
        out = ad.add(out, bias)
    return out


def mlp(x, layers):
    """Alternating linear + ELU; no activation after the last layer.

    ``layers`` is a list of (weight, bias) pairs.
    """
    out = ad.as_var(x)
    for i, (w, b) in enumerate(layers):
        out = linear(out, w, b)
        if i + 1 < len(layers):
            out = ad.elu(out)
    return out


def attention(x, w_q, w_k, w_v):
    """Scaled dot-product self-attention over the trailing two axes.

    x: (..., seq_len, d_in); projections are (d, d_in) for Q/K and
    (d_v, d_in) for V. Returns (..., seq_len, d_v).
    """
    x = ad.as_var(x)
    q = linear(x, w_q)
    k = linear(x, w_k)
    v = linear(x, w_v)
    d = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, _swap_last(k))), 1.0 / np.sqrt(d))
    weights = ad.temp_softmax(scores, tau=1.0, axis=-1)
    return ad.matmul(weights, v)


def _swap_last(x):
    axes = list(range(len(x.shape)))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def gru_forward(x, w, u, b, reverse=False):
    """Single-direction GRU over x (batch, T, d_in), as a fused primitive.

    Stacked weights hold the update (z), reset (r), and candidate (n)
    blocks: w (3h, d_in), u (3h, h), b (3h,). The candidate uses the
    reset-gated hidden state. The backward pass is hand-derived
    backprop-through-time over the cached gate activations.
    Returns (batch, T, h).
    """
    xv, wv, uv, bv = (ad.as_var(v) for v in (x, w, u, b))
    if len(xv.shape) != 3:
        raise ParameterError("gru_forward expects (batch, T, d_in) input")
    bsz, T, d_in = xv.shape
    h3 = wv.shape[0]
    if h3 % 3 or uv.shape != (h3, h3 // 3) or bv.shape != (h3,):
        raise ParameterError("stacked GRU weights must be (3h, d_in), (3h, h), (3h,)")
    if wv.shape[1] != d_in:
        raise ParameterError(f"GRU input dim {d_in} != weight dim {wv.shape[1]}")
    h = h3 // 3
    wd, ud, bd = wv.data, uv.data, bv.data
    xd = xv.data[:, ::-1, :] if reverse else xv.data
    uz, ur, un = ud[:h], ud[h:2 * h], ud[2 * h:]

    xw = xd @ wd.T + bd                       # (B, T, 3h), input-to-hidden
    zs = np.empty((T, bsz, h))
    rs = np.empty((T, bsz, h))
    ns = np.empty((T, bsz, h))
    hs = np.empty((T + 1, bsz, h))
    hs[0] = 0.0
    for t in range(T):
        hp = hs[t]
        z = _sig(xw[:, t, :h] + hp @ uz.T)
        r = _sig(xw[:, t, h:2 * h] + hp @ ur.T)
        n = np.tanh(xw[:, t, 2 * h:] + (r * hp) @ un.T)
        zs[t], rs[t], ns[t] = z, r, n
        hs[t + 1] = z * hp + (1.0 - z) * n
    out = hs[1:].transpose(1, 0, 2)
    if reverse:
        out = out[:, ::-1, :]

    def vjp(g):
        gg = g[:, ::-1, :] if reverse else g
        gx_rows = np.empty((T, bsz, d_in))
        d_az = np.empty((T, bsz, h))
        d_ar = np.empty((T, bsz, h))
        d_an = np.empty((T, bsz, h))
        carry = np.zeros((bsz, h))
        wz_, wr_, wn_ = wd[:h], wd[h:2 * h], wd[2 * h:]
        for t in range(T - 1, -1, -1):
            gh = gg[:, t, :] + carry
            hp, z, r, n = hs[t], zs[t], rs[t], ns[t]
            daz = gh * (hp - n) * z * (1.0 - z)
            dan = gh * (1.0 - z) * (1.0 - n * n)
            s = dan @ un
            dar = s * hp * r * (1.0 - r)
            carry = gh * z + daz @ uz + dar @ ur + s * r
            d_az[t], d_ar[t], d_an[t] = daz, dar, dan
            gx_rows[t] = daz @ wz_ + dar @ wr_ + dan @ wn_
        gx = gx_rows.transpose(1, 0, 2)
        d_all = np.concatenate(
            [d_az.reshape(-1, h), d_ar.reshape(-1, h), d_an.reshape(-1, h)], axis=1
        )                                     # (T*B, 3h)
        x_flat = xd.transpose(1, 0, 2).reshape(-1, d_in)
        gw = d_all.T @ x_flat
        hp_flat = hs[:-1].reshape(-1, h)
        rhp_flat = (rs * hs[:-1]).reshape(-1, h)
        gu = np.concatenate([
            d_az.reshape(-1, h).T @ hp_flat,
            d_ar.reshape(-1, h).T @ hp_flat,
            d_an.reshape(-1, h).T @ rhp_flat,
        ], axis=0)
        gb = d_all.sum(axis=0)
        if reverse:
            gx = gx[:, ::-1, :]
        return gx, gw, gu, gb

    return ad.Var(out, (xv, wv, uv, bv), vjp)


def _sig(a):
    return 1.0 / (1.0 + np.exp(-a))


def bigru(x, params, prefix="gru"):
    """Bidirectional GRU; concatenates forward and backward hidden states.

    ``params`` maps f"{prefix}.fw.w|u|b" and f"{prefix}.bw.w|u|b" to Vars
    or ndarrays. Returns (batch, T, 2h).
    """
    fw = gru_forward(x, params[f"{prefix}.fw.w"], params[f"{prefix}.fw.u"],
                     params[f"{prefix}.fw.b"])
    bw = gru_forward(x, params[f"{prefix}.bw.w"], params[f"{prefix}.bw.u"],
                     params[f"{prefix}.bw.b"], reverse=True)
    return ad.concat([fw, bw], axis=-1)
