"""The learned source-imaging network and its training loop.

Pipeline per scalp fragment: max-abs normalization, overlapped patching,
then N refinement blocks, each combining a spectral view (FFT, per-part
temperature softmax, inverse FFT), a temporal view (temperature softmax
along time), a convex fusion of the two, and a patch-wise view (energy-based
key-patch selection, self-attention over the key patch, broadcast of the
attention summary, Conv/TransposeConv blocks). The head merges patches,
upsamples channels to the source space with a transposed convolution, adds
an MLP projection and a learned residual projection of the input, and runs
a BiGRU over time.
"""

import csv
import json
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import layers
from .errors import ConfigError, DataError, DivergenceError, ParameterError
from .nmm import load_sample
from .optim import AdamState, adam_step, load_adam_state, save_adam_state
from .patches import coverage_counts, extract_patches, normalize_fragment, padded_length
from .tensorio import load_tensor_dir, save_tensor_dir


@dataclass(frozen=True)
class FairConfig:
    n_channels: int
    n_regions: int
    n_timepoints: int
    patch_len: int = 16
    overlap: int = 8
    tau: float = 0.1
    alpha: float = 0.5
    n_blocks: int = 1
    attention_dim: int = 16
    mlp_hidden: int = 64
    gru_hidden: int = 0          # 0 -> n_regions // 2
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-5
    use_spectral: bool = True
    use_temporal: bool = True
    use_patch: bool = True
    spectral_reweight: bool = False   # multiply spectra by their softmax
                                      # instead of replacing them

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha must be in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        l = self.patch_len
        if l & (l - 1):
            raise ConfigError("patch_len must be a power of two")
        h = self.resolved_gru_hidden
        if 2 * h != self.n_regions:
            raise ConfigError(
                "BiGRU output (2 * gru_hidden) must equal n_regions; "
                f"got 2*{h} vs {self.n_regions}"
            )

    @property
    def resolved_gru_hidden(self):
        return self.gru_hidden or self.n_regions // 2

    @property
    def upsample_stride(self):
        return int(np.ceil(self.n_regions / self.n_channels))

    @property
    def upsample_kernel(self):
        return self.upsample_stride + 2


@dataclass
class RefinementTrace:
    """Intermediate states of one refinement block, kept for inspection."""
    P: np.ndarray = None
    P_S: np.ndarray = None
    P_T: np.ndarray = None
    P_L: np.ndarray = None
    key_indices: np.ndarray = None
    attention_out: np.ndarray = None
    P_A: np.ndarray = None
    P_O: np.ndarray = None


# ---------------------------------------------------------------------------
# parameter initialization


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg, seed):
    """All learnable tensors, uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.Generator(np.random.PCG64(seed))
    l = cfg.patch_len
    d = cfg.attention_dim
    c_in = 2 * l              # refined plane + broadcast attention plane
    c_mid = 2 * c_in
    h = cfg.resolved_gru_hidden
    params = {}
    for n in range(cfg.n_blocks):
        pre = f"block{n}."
        params[pre + "attn.embed_w"] = _uniform(rng, (d,), 1)
        params[pre + "attn.embed_b"] = np.zeros(d)
        params[pre + "attn.wq"] = _uniform(rng, (d, d), d)
        params[pre + "attn.wk"] = _uniform(rng, (d, d), d)
        params[pre + "attn.wv"] = _uniform(rng, (d, d), d)
        params[pre + "attn.out_w"] = _uniform(rng, (1, d), d)
        params[pre + "attn.out_b"] = np.zeros(1)
        params[pre + "conv.w1"] = _uniform(rng, (c_mid, c_in, 3, 3), c_in * 9)
        params[pre + "conv.b1"] = np.zeros(c_mid)
        params[pre + "conv.ln1_gain"] = np.ones(c_mid)
        params[pre + "conv.ln1_bias"] = np.zeros(c_mid)
        params[pre + "conv.w2"] = _uniform(rng, (c_mid, l, 3, 3), c_mid * 9)
        params[pre + "conv.b2"] = np.zeros(l)
        params[pre + "conv.ln2_gain"] = np.ones(l)
        params[pre + "conv.ln2_bias"] = np.zeros(l)
    kh = cfg.upsample_kernel
    params["head.up_w"] = _uniform(rng, (1, 1, kh, 1), kh)
    params["head.up_b"] = np.zeros(cfg.n_regions)
    params["head.mlp_w1"] = _uniform(rng, (cfg.mlp_hidden, cfg.n_channels),
                                     cfg.n_channels)
    params["head.mlp_b1"] = np.zeros(cfg.mlp_hidden)
    params["head.mlp_w2"] = _uniform(rng, (cfg.n_regions, cfg.mlp_hidden),
                                     cfg.mlp_hidden)
    params["head.mlp_b2"] = np.zeros(cfg.n_regions)
    params["head.res_w"] = _uniform(rng, (cfg.n_regions, cfg.n_channels),
                                    cfg.n_channels)
    for direction in ("fw", "bw"):
        params[f"gru.{direction}.w"] = _uniform(rng, (3 * h, cfg.n_regions),
                                                cfg.n_regions)
        params[f"gru.{direction}.u"] = _uniform(rng, (3 * h, h), h)
        params[f"gru.{direction}.b"] = np.zeros(3 * h)
    return params


# ---------------------------------------------------------------------------
# refinement views


def _wrap(x):
    return (x, True) if isinstance(x, ad.Var) else (ad.Var(x), False)


def _unwrap(out, was_var):
    return out if was_var else out.data


def spectral_refine(grid, tau, reweight=False):
    """FFT each patch, temperature-softmax the real and imaginary parts
    independently, inverse-transform, keep the real part."""
    g, was_var = _wrap(grid)
    re, im = ad.fft(g)
    rs = ad.temp_softmax(re, tau, axis=-1)
    is_ = ad.temp_softmax(im, tau, axis=-1)
    if reweight:
        rs = ad.mul(re, rs)
        is_ = ad.mul(im, is_)
    return _unwrap(ad.ifft(rs, is_), was_var)


def temporal_refine(grid, tau):
    """Temperature softmax along the time axis of each patch."""
    g, was_var = _wrap(grid)
    return _unwrap(ad.temp_softmax(g, tau, axis=-1), was_var)


def fuse(p_s, p_t, alpha):
    """Elementwise convex combination alpha*p_s + (1-alpha)*p_t."""
    if not (0.0 <= alpha <= 1.0):
        raise ParameterError("alpha must be in [0, 1]")
    a, was_var_a = _wrap(p_s)
    b, was_var_b = _wrap(p_t)
    if a.shape != b.shape:
        raise ParameterError("fuse: shapes differ")
    out = ad.add(ad.mul(a, alpha), ad.mul(b, 1.0 - alpha))
    return _unwrap(out, was_var_a or was_var_b)


def select_key_patch(grid):
    """Per-channel index of the patch with maximal sum of squared entries.

    Accepts (..., n_patches, l); ties break to the smallest index.
    """
    data = grid.data if isinstance(grid, ad.Var) else np.asarray(grid)
    energy = np.sum(data * data, axis=-1)
    return np.argmax(energy, axis=-1)


def patch_refine(grid, params, cfg, prefix="block0.", trace=None):
    """Key-patch self-attention summary broadcast onto every patch of its
    channel, then Conv2D-ELU-LayerNorm and TransposeConv2D-ELU-LayerNorm
    over the channel x patch grid, restoring the input feature depth."""
    g, was_var = _wrap(grid)
    b, n_c, n_p, l = g.shape
    key_idx = select_key_patch(g)                       # (b, n_c)
    idx = np.broadcast_to(key_idx[:, :, None, None], (b, n_c, 1, l)).copy()
    key = ad.take_along(g, idx, axis=-2)                # (b, n_c, 1, l)
    tokens = ad.reshape(key, (b, n_c, l, 1))
    emb = ad.add(ad.mul(tokens, params[prefix + "attn.embed_w"]),
                 params[prefix + "attn.embed_b"])       # (b, n_c, l, d)
    att = layers.attention(emb, params[prefix + "attn.wq"],
                           params[prefix + "attn.wk"],
                           params[prefix + "attn.wv"])  # (b, n_c, l, d)
    summary = layers.linear(att, params[prefix + "attn.out_w"],
                            params[prefix + "attn.out_b"])
    summary = ad.reshape(summary, (b, n_c, 1, l))
    plane = ad.broadcast_to(summary, (b, n_c, n_p, l))
    # fold patch samples into conv channels: (b, 2l, n_c, n_p)
    base = ad.transpose(g, (0, 3, 1, 2))
    extra = ad.transpose(plane, (0, 3, 1, 2))
    aug = ad.concat([base, extra], axis=1)
    h1 = ad.conv2d(aug, params[prefix + "conv.w1"], stride=1, padding=1)
    h1 = ad.add(h1, ad.reshape(ad.as_var(params[prefix + "conv.b1"]), (-1, 1, 1)))
    h1 = _channel_layer_norm(ad.elu(h1), params[prefix + "conv.ln1_gain"],
                             params[prefix + "conv.ln1_bias"])
    h2 = ad.transpose_conv2d(h1, params[prefix + "conv.w2"], stride=1, padding=1)
    h2 = ad.add(h2, ad.reshape(ad.as_var(params[prefix + "conv.b2"]), (-1, 1, 1)))
    h2 = _channel_layer_norm(ad.elu(h2), params[prefix + "conv.ln2_gain"],
                             params[prefix + "conv.ln2_bias"])
    out = ad.transpose(h2, (0, 2, 3, 1))                # (b, n_c, n_p, l)
    if trace is not None:
        trace.key_indices = key_idx.copy()
        trace.attention_out = att.data.copy()
        trace.P_A = aug.data.copy()
    return _unwrap(out, was_var)


def _channel_layer_norm(x, gain, bias):
    """LayerNorm over the channel axis of an NCHW tensor."""
    xt = ad.transpose(x, (0, 2, 3, 1))
    xt = ad.layer_norm(xt, gain, bias)
    return ad.transpose(xt, (0, 3, 1, 2))


def fair_block(grid, params, cfg, block_idx=0, trace=None):
    """One refinement pass; shape-preserving, so blocks can stack."""
    prefix = f"block{block_idx}."
    p_s = spectral_refine(grid, cfg.tau, cfg.spectral_reweight) \
        if cfg.use_spectral else None
    p_t = temporal_refine(grid, cfg.tau) if cfg.use_temporal else None
    if p_s is not None and p_t is not None:
        p_l = fuse(p_s, p_t, cfg.alpha)
    elif p_s is not None:
        p_l = p_s
    elif p_t is not None:
        p_l = p_t
    else:
        p_l = grid
    if trace is not None:
        trace.P = (grid.data if isinstance(grid, ad.Var) else grid).copy()
        if p_s is not None:
            trace.P_S = p_s.data.copy()
        if p_t is not None:
            trace.P_T = p_t.data.copy()
        trace.P_L = (p_l.data if isinstance(p_l, ad.Var) else p_l).copy()
    out = patch_refine(p_l, params, cfg, prefix, trace) if cfg.use_patch else p_l
    if trace is not None:
        trace.P_O = (out.data if isinstance(out, ad.Var) else out).copy()
    return out


# ---------------------------------------------------------------------------
# full forward / loss


def _as_param_vars(params):
    return {k: ad.as_var(v) for k, v in params.items()}


def forward(X, params, cfg, return_trace=False):
    """Scalp fragment(s) -> source estimate(s).

    X is (n_channels, n_timepoints) or a (batch, ...) stack; parameters may
    be ndarrays or Vars (Vars keep the tape alive for training).
    """
    single = np.ndim(X) == 2 if not isinstance(X, ad.Var) else len(X.shape) == 2
    x_data = X.data if isinstance(X, ad.Var) else np.asarray(X, dtype=np.float64)
    if single:
        x_data = x_data[None]
    bsz, n_c, n_t = x_data.shape
    if n_c != cfg.n_channels or n_t != cfg.n_timepoints:
        raise ParameterError(
            f"fragment is {n_c}x{n_t}, config expects "
            f"{cfg.n_channels}x{cfg.n_timepoints}"
        )
    # normalize by max-abs; an all-zero fragment keeps a zero output scale
    # so the estimate scales linearly with the input all the way down
    for i in range(bsz):
        normalize_fragment(x_data[i])          # finite-ness check
    scales = np.max(np.abs(x_data), axis=(1, 2))
    xn = x_data / np.where(scales == 0.0, 1.0, scales)[:, None, None]
    pvars = _as_param_vars(params)

    grid_np = extract_patches(xn, cfg.patch_len, cfg.overlap)
    g = ad.Var(grid_np.patches)
    trace = RefinementTrace() if return_trace else None
    for n in range(cfg.n_blocks):
        g = fair_block(g, pvars, cfg, block_idx=n,
                       trace=trace if n == cfg.n_blocks - 1 else None)

    # merge patches back to the (padded) time axis, exact overlap-add inverse
    n_pad = padded_length(n_t, cfg.patch_len, grid_np.stride)
    cov = coverage_counts(grid_np.n_patches, cfg.patch_len, grid_np.stride)
    merged = ad.mul(ad.overlap_add(g, grid_np.stride, n_pad), 1.0 / cov)
    merged = merged[..., :n_t]                               # (b, n_c, n_t)

    # transposed convolution upsamples the channel axis n_c -> n_s
    s = cfg.upsample_stride
    up = ad.transpose_conv2d(ad.reshape(merged, (bsz, 1, n_c, n_t)),
                             pvars["head.up_w"], stride=(s, 1), padding=0)
    up = ad.reshape(up[:, :, :cfg.n_regions, :], (bsz, cfg.n_regions, n_t))
    up = ad.add(up, ad.reshape(pvars["head.up_b"], (-1, 1)))
    up_t = ad.transpose(up, (0, 2, 1))                       # (b, n_t, n_s)

    xn_t = ad.transpose(ad.Var(xn), (0, 2, 1))               # (b, n_t, n_c)
    mlp_t = layers.mlp(xn_t, [(pvars["head.mlp_w1"], pvars["head.mlp_b1"]),
                              (pvars["head.mlp_w2"], pvars["head.mlp_b2"])])
    res_t = layers.linear(xn_t, pvars["head.res_w"])

    h = ad.add(ad.add(up_t, mlp_t), res_t)
    s_hat_t = layers.bigru(h, pvars)                         # (b, n_t, n_s)
    s_hat = ad.transpose(s_hat_t, (0, 2, 1))
    s_hat = ad.mul(s_hat, scales[:, None, None])
    if single:
        s_hat = ad.reshape(s_hat, (cfg.n_regions, n_t))
    if return_trace:
        return s_hat, trace
    return s_hat


def loss(s_hat, s_true):
    """Squared Frobenius error divided by the region count; batches average."""
    sh = ad.as_var(s_hat)
    st = np.asarray(s_true.data if isinstance(s_true, ad.Var) else s_true,
                    dtype=np.float64)
    if sh.shape != st.shape:
        raise ParameterError(f"loss: shapes differ, {sh.shape} vs {st.shape}")
    n_s = st.shape[-2]
    diff = sh - ad.Var(st)
    sq = ad.mul(diff, diff)
    total = ad.vsum(sq)
    batch = int(np.prod(st.shape[:-2])) if st.ndim > 2 else 1
    return ad.mul(total, 1.0 / (n_s * batch))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(out_dir, params, cfg, adam_state=None, epoch=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_tensor_dir(params, out_dir / "params")
    meta = {"config": asdict(cfg), "epoch": epoch}
    (out_dir / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if adam_state is not None:
        save_adam_state(adam_state, out_dir)


def load_checkpoint(in_dir):
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "model.json").read_text())
    cfg = FairConfig(**meta["config"])
    params = {k: v.astype(np.float64)
              for k, v in load_tensor_dir(in_dir / "params").items()}
    adam_state = None
    if (in_dir / "adam_state.json").exists():
        adam_state = load_adam_state(in_dir)
    return params, cfg, meta.get("epoch"), adam_state


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint_dir: Path
    log_path: Path
    history: list = field(default_factory=list)   # (epoch, train, val, lr)
    best_val: float = float("inf")


def _load_split(manifest_entries, split):
    xs, ss = [], []
    for e in manifest_entries:
        if e["split"] != split:
            continue
        sample = load_sample(e["path"])
        xs.append(sample.X)
        ss.append(sample.S)
    if not xs:
        raise DataError(f"manifest has no samples in split '{split}'")
    return np.stack(xs), np.stack(ss)


def evaluate_loss(xs, ss, params, cfg, batch_size=32):
    total, count = 0.0, 0
    for i in range(0, len(xs), batch_size):
        xb, sb = xs[i:i + batch_size], ss[i:i + batch_size]
        lv = loss(forward(xb, params, cfg), sb)
        total += float(lv.data) * len(xb)
        count += len(xb)
    return total / count


def train(manifest_entries, cfg, epochs, seed, out_dir,
          start_epoch=0, params=None, adam_state=None,
          plateau_patience=3, plateau_tol=1e-4, lr_floor=1e-6):
    """Mini-batch Adam with plateau LR halving and best-val checkpointing."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    xs_train, ss_train = _load_split(manifest_entries, "train")
    xs_val, ss_val = _load_split(manifest_entries, "val")
    if params is None:
        params = init_params(cfg, seed)
    if adam_state is None:
        adam_state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    result = TrainResult(checkpoint_dir=out_dir / "best",
                         log_path=out_dir / "train_log.csv")
    stall = 0
    mode = "a" if start_epoch else "w"
    with open(result.log_path, mode, newline="") as log_fh:
        writer = csv.writer(log_fh)
        if not start_epoch:
            writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
            order = rng.permutation(len(xs_train))
            epoch_loss, seen = 0.0, 0
            for i in range(0, len(order), cfg.batch_size):
                batch = order[i:i + cfg.batch_size]
                pvars = _as_param_vars(params)
                lv = loss(forward(xs_train[batch], pvars, cfg), ss_train[batch])
                if not np.isfinite(lv.data):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                lv.backward()
                grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                         for k, v in pvars.items()}
                adam_step(adam_state, params, grads)
                epoch_loss += float(lv.data) * len(batch)
                seen += len(batch)
            train_loss = epoch_loss / seen
            val_loss = evaluate_loss(xs_val, ss_val, params, cfg)
            if not np.isfinite(val_loss):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
            writer.writerow([epoch, f"{train_loss:.8e}", f"{val_loss:.8e}",
                             f"{adam_state.lr:.3e}"])
            log_fh.flush()
            result.history.append((epoch, train_loss, val_loss, adam_state.lr))
            if val_loss < result.best_val * (1.0 - plateau_tol):
                result.best_val = val_loss
                stall = 0
                save_checkpoint(result.checkpoint_dir, params, cfg,
                                adam_state, epoch)
            else:
                stall += 1
                if stall >= plateau_patience:
                    adam_state.lr = max(lr_floor, adam_state.lr / 2.0)
                    stall = 0
            if result.best_val == float("inf"):
                # never improved yet; still keep a checkpoint of epoch 1
                result.best_val = val_loss
                save_checkpoint(result.checkpoint_dir, params, cfg,
                                adam_state, epoch)
    return result
