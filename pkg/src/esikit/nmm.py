"""Jansen-Rit neural-mass simulation and paired source/scalp data generation.

The three-population model is integrated with fixed-step RK4; the external
firing-rate input p(t) is drawn on a fixed 1 ms grid and held piecewise
constant, so refining the integration step converges to the same waveform.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from .errors import InstabilityError, ParameterError, PlacementError
from .geometry import grow_patch, hop_distances
from .tensorio import save_tensor, load_tensor

INPUT_DT = 1e-3           # resolution of the piecewise-constant input drive
HOP_DECAY = 0.7           # per-hop amplitude factor inside an extended source
NOISELESS = float("inf")  # snr_db sentinel disabling sensor noise


@dataclass(frozen=True)
class JansenRitParams:
    A: float = 3.25          # excitatory gain, mV
    B: float = 22.0          # inhibitory gain, mV
    a: float = 100.0         # excitatory rate constant, 1/s
    b: float = 50.0          # inhibitory rate constant, 1/s
    C: float = 135.0         # connectivity constant
    c2_factor: float = 0.8   # C2 = c2_factor * C (0.9 in the spike preset)
    e0: float = 2.5          # half max firing rate, 1/s
    v0: float = 6.0          # sigmoid midpoint, mV
    r_sig: float = 0.56      # sigmoid steepness, 1/mV
    input_mean: float = 220.0
    input_std: float = 22.0
    input_pulse_rate: float = 0.0   # spike preset: Poisson pulse rate, 1/s
    input_pulse_amp: float = 0.0
    dt: float = 1e-4
    burn_in: float = 1.0

    def __post_init__(self):
        for name in ("A", "B", "a", "b", "C", "e0", "r_sig"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"JansenRitParams.{name} must be > 0")
        if self.dt > 1e-3:
            raise ParameterError("dt must be <= 1e-3 s")
        if self.burn_in < 0:
            raise ParameterError("burn_in must be >= 0")


ALPHA_PRESET = JansenRitParams()
SPIKE_PRESET = JansenRitParams(c2_factor=0.9, input_pulse_rate=3.0,
                               input_pulse_amp=400.0)
PRESETS = {"alpha": ALPHA_PRESET, "spike": SPIKE_PRESET}


@dataclass(frozen=True)
class SimulationConfig:
    snr_db: float
    n_sources: int
    extent: int
    n_timepoints: int
    sample_rate: float
    seed: int
    preset: str = "alpha"

    def __post_init__(self):
        if self.n_sources < 1:
            raise ParameterError("n_sources must be >= 1")
        if self.n_timepoints < 32:
            raise ParameterError("n_timepoints must be >= 32")
        if not np.isfinite(self.snr_db) and self.snr_db != NOISELESS:
            raise ParameterError("snr_db must be finite or the noiseless sentinel")


@dataclass(frozen=True)
class PairedSample:
    X: np.ndarray              # (n_channels, n_timepoints)
    S: np.ndarray              # (n_regions, n_timepoints)
    ground_truth: tuple        # tuple of RegionSet
    config: SimulationConfig


def _sigmoid_rate(v, e0, v0, r_sig):
    # clamp the exponent; the sigmoid saturates long before overflow
    z = r_sig * (v0 - v)
    if z > 500.0:
        return 0.0
    return 2.0 * e0 / (1.0 + math.exp(z))


def simulate_jansen_rit(params, n_timepoints, sample_rate, seed):
    """Pyramidal membrane potential y1 - y2, mean-centered, at sample_rate."""
    if sample_rate < 100.0:
        raise ParameterError(f"sample_rate must be >= 100 Hz, got {sample_rate}")
    p = params
    duration = params.burn_in + n_timepoints / sample_rate
    n_steps = int(np.ceil(duration / p.dt))
    rng = np.random.Generator(np.random.PCG64(seed))
    # input drive on a fixed grid, independent of dt
    n_inputs = int(np.ceil(duration / INPUT_DT)) + 1
    drive = p.input_mean + p.input_std * rng.standard_normal(n_inputs)
    if p.input_pulse_rate > 0.0:
        pulses = rng.random(n_inputs) < p.input_pulse_rate * INPUT_DT
        drive = drive + p.input_pulse_amp * pulses
    drive = drive.tolist()
    A, B, a, b = p.A, p.B, p.a, p.b
    e0, v0, rs = p.e0, p.v0, p.r_sig
    c1 = p.C
    c2 = p.c2_factor * p.C
    c3 = c4 = 0.25 * p.C
    Aa, Bb = A * a, B * b
    a2, b2 = a * a, b * b
    dt = p.dt
    sig = _sigmoid_rate
    y0 = y1 = y2 = y3 = y4 = y5 = 0.0
    steps_per_sample = 1.0 / (sample_rate * dt)
    next_sample = p.burn_in / dt
    samples = []
    dt_over_input = dt / INPUT_DT
    for k in range(n_steps + 1):
        if k >= next_sample - 1e-9 and len(samples) < n_timepoints:
            samples.append(y1 - y2)
            next_sample += steps_per_sample
        d = drive[int(k * dt_over_input)]

        def derivs(u0, u1, u2, u3, u4, u5):
            return (
                u3, u4, u5,
                Aa * sig(u1 - u2, e0, v0, rs) - 2.0 * a * u3 - a2 * u0,
                Aa * (d + c2 * sig(c1 * u0, e0, v0, rs)) - 2.0 * a * u4 - a2 * u1,
                Bb * c4 * sig(c3 * u0, e0, v0, rs) - 2.0 * b * u5 - b2 * u2,
            )

        k1 = derivs(y0, y1, y2, y3, y4, y5)
        k2 = derivs(*(s + 0.5 * dt * q for s, q in zip((y0, y1, y2, y3, y4, y5), k1)))
        k3 = derivs(*(s + 0.5 * dt * q for s, q in zip((y0, y1, y2, y3, y4, y5), k2)))
        k4 = derivs(*(s + dt * q for s, q in zip((y0, y1, y2, y3, y4, y5), k3)))
        y0, y1, y2, y3, y4, y5 = (
            s + (dt / 6.0) * (q1 + 2.0 * q2 + 2.0 * q3 + q4)
            for s, q1, q2, q3, q4 in zip((y0, y1, y2, y3, y4, y5), k1, k2, k3, k4)
        )
        if abs(y0) > 1e6 or abs(y1) > 1e6 or abs(y2) > 1e6:
            raise InstabilityError(
                f"Jansen-Rit integration blew up at t={k * dt:.4f}s with {params}"
            )
    if len(samples) < n_timepoints:
        raise ParameterError("integration window shorter than requested waveform")
    wave = np.asarray(samples[:n_timepoints])
    return wave - wave.mean()


def generate_source_activity(space, cfg, params):
    """Place non-overlapping extended sources and fill S with NMM waveforms.

    Each source shares one waveform across its footprint, scaled by
    HOP_DECAY per graph hop from the center. Returns (S, ground_truth).
    """
    probe = range(space.n_regions) if space.n_regions <= 256 else range(0, space.n_regions, 17)
    max_footprint = max(len(grow_patch(space, c, cfg.extent)) for c in probe)
    if cfg.n_sources * max_footprint >= space.n_regions / 2:
        raise ParameterError(
            "source footprints would cover half the source space; "
            "reduce n_sources or extent"
        )
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    footprints = []
    occupied = set()
    attempts = 0
    while len(footprints) < cfg.n_sources:
        attempts += 1
        if attempts > 1000:
            raise PlacementError(
                f"could not place {cfg.n_sources} non-overlapping sources "
                f"of extent {cfg.extent} in 1000 attempts"
            )
        center = int(rng.integers(space.n_regions))
        fp = grow_patch(space, center, cfg.extent)
        if occupied & set(fp.regions):
            continue
        footprints.append((center, fp))
        occupied |= set(fp.regions)
    S = np.zeros((space.n_regions, cfg.n_timepoints))
    for k, (center, fp) in enumerate(footprints):
        wave = simulate_jansen_rit(params, cfg.n_timepoints, cfg.sample_rate,
                                   seed=cfg.seed * 1000003 + k)
        hops = hop_distances(space, center, cfg.extent - 1)
        for region in fp:
            S[region] = (HOP_DECAY ** hops[region]) * wave
    return S, tuple(fp for _, fp in footprints)


def project_forward(lf, S):
    """Noiseless scalp projection X = G @ S."""
    G = lf.matrix
    S = np.asarray(S, dtype=np.float64)
    if G.shape[1] != S.shape[0]:
        raise ParameterError(
            f"lead field has {G.shape[1]} regions but S has {S.shape[0]} rows"
        )
    return G @ S


def add_noise(x_clean, snr_db, seed):
    """Add white Gaussian sensor noise at the requested SNR (dB)."""
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if snr_db == NOISELESS:
        return x_clean.copy()
    p_signal = float(np.mean(x_clean ** 2))
    if p_signal == 0.0:
        raise ParameterError("cannot set an SNR on a zero-power signal")
    p_noise = p_signal / (10.0 ** (snr_db / 10.0))
    rng = np.random.Generator(np.random.PCG64(seed))
    return x_clean + np.sqrt(p_noise) * rng.standard_normal(x_clean.shape)


def simulate_sample(space, lf, cfg, params=None):
    if params is None:
        params = PRESETS[cfg.preset]
    S, gt = generate_source_activity(space, cfg, params)
    x_clean = project_forward(lf, S)
    X = add_noise(x_clean, cfg.snr_db, seed=cfg.seed ^ 0x5EED)
    return PairedSample(X=X, S=S, ground_truth=gt, config=cfg)


def _config_dict(cfg):
    d = asdict(cfg)
    if d["snr_db"] == NOISELESS:
        d["snr_db"] = "inf"
    return d


def config_from_dict(d):
    d = dict(d)
    if d.get("snr_db") == "inf":
        d["snr_db"] = NOISELESS
    return SimulationConfig(**d)


def split_for_index(index):
    """Deterministic 10:1:1 split by index modulo 12."""
    r = index % 12
    return "val" if r == 10 else "test" if r == 11 else "train"


def save_sample(sample, stem):
    """Write X/S tensors plus a JSON sidecar next to ``stem``."""
    stem = Path(stem)
    save_tensor(sample.X, stem.with_suffix(".X.esit"))
    save_tensor(sample.S, stem.with_suffix(".S.esit"))
    sidecar = {
        "X": stem.name + ".X.esit",
        "S": stem.name + ".S.esit",
        "ground_truth": [sorted(fp.regions) for fp in sample.ground_truth],
        "config": _config_dict(sample.config),
    }
    meta_path = stem.with_suffix(".json")
    meta_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return meta_path


def load_sample(meta_path):
    from .geometry import RegionSet

    meta_path = Path(meta_path)
    meta = json.loads(meta_path.read_text())
    X = load_tensor(meta_path.parent / meta["X"]).astype(np.float64)
    S = load_tensor(meta_path.parent / meta["S"]).astype(np.float64)
    gt = tuple(RegionSet(frozenset(r)) for r in meta["ground_truth"])
    return PairedSample(X=X, S=S, ground_truth=gt,
                        config=config_from_dict(meta["config"]))


def generate_dataset(space, lf, cfg_grid, n_samples, out_dir, seed_base=0):
    """Write n_samples per grid cell plus a manifest with the 10:1:1 split.

    Per-sample seeds are seed_base + running index, so generation is
    deterministic and order-independent across workers.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    index = 0
    for cell, base_cfg in enumerate(cfg_grid):
        for i in range(n_samples):
            cfg = replace(base_cfg, seed=seed_base + index)
            stem = out_dir / f"sample_{cell:03d}_{i:06d}"
            jobs.append((stem, cfg, split_for_index(i)))
            index += 1

    def run(job):
        stem, cfg, split = job
        sample = simulate_sample(space, lf, cfg)
        meta_path = save_sample(sample, stem)
        return {"path": meta_path.name, "split": split,
                "config": _config_dict(cfg)}

    workers = int(os.environ.get("ESI_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(run, jobs))
    else:
        entries = [run(job) for job in jobs]
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(entries, indent=2, sort_keys=True))
    return manifest_path


def load_manifest(manifest_path):
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    for e in entries:
        e["path"] = str(manifest_path.parent / e["path"])
    return entries
