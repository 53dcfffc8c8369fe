import numpy as np
import pytest

import esikit.model as fm
from esikit import autodiff as ad
from esikit.errors import ConfigError, DivergenceError, ParameterError
from esikit.geometry import build_lead_field, build_synthetic_source_space
from esikit.nmm import SimulationConfig, generate_dataset, load_manifest
from esikit.optim import AdamState, adam_step

RNG = np.random.Generator(np.random.PCG64(5))

TOY = fm.FairConfig(n_channels=4, n_regions=8, n_timepoints=32,
                    patch_len=8, overlap=4, attention_dim=4, mlp_hidden=8)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ConfigError):
        fm.FairConfig(n_channels=4, n_regions=8, n_timepoints=32, alpha=1.5)
    with pytest.raises(ConfigError):
        fm.FairConfig(n_channels=4, n_regions=8, n_timepoints=32, tau=0.0)
    with pytest.raises(ConfigError):
        fm.FairConfig(n_channels=4, n_regions=8, n_timepoints=32, patch_len=12)
    with pytest.raises(ConfigError):
        fm.FairConfig(n_channels=4, n_regions=9, n_timepoints=32)  # odd regions
    cfg = fm.FairConfig(n_channels=32, n_regions=64, n_timepoints=128)
    assert cfg.resolved_gru_hidden == 32
    assert cfg.upsample_stride == 2
    assert cfg.upsample_kernel == 4


def test_paper_hyperparameter_defaults():
    cfg = fm.FairConfig(n_channels=32, n_regions=64, n_timepoints=128)
    assert cfg.patch_len == 16 and cfg.overlap == 8
    assert cfg.tau == 0.1
    assert cfg.n_blocks == 1
    assert cfg.lr == 1e-4 and cfg.weight_decay == 1e-5


# ---------------------------------------------------------------------------
# refinement views


def test_spectral_refine_constant_patch_oracle():
    l = 8
    grid = np.full((1, 1, 1, l), 2.0)
    out = fm.spectral_refine(grid, tau=0.1)
    spec = np.fft.fft(grid[0, 0, 0])
    re, im = spec.real, spec.imag

    def softmax(v, tau):
        e = np.exp((v - v.max()) / tau)
        return e / e.sum()

    expected = np.real(np.fft.ifft(softmax(re, 0.1) + 1j * softmax(im, 0.1)))
    np.testing.assert_allclose(out[0, 0, 0], expected, atol=1e-9)
    # DC bin dominates the softmaxed real spectrum
    assert softmax(re, 0.1)[0] > 1.0 - 1e-12


def test_spectral_refine_shape_and_tau_saturation():
    grid = RNG.standard_normal((2, 3, 4, 8))
    out = fm.spectral_refine(grid, tau=0.1)
    assert out.shape == grid.shape
    # tau -> infinity: uniform spectra regardless of input
    a = fm.spectral_refine(RNG.standard_normal((1, 1, 1, 8)), tau=1e9)
    b = fm.spectral_refine(RNG.standard_normal((1, 1, 1, 8)), tau=1e9)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_spectral_reweight_variant():
    grid = RNG.standard_normal((1, 2, 3, 8))
    replace = fm.spectral_refine(grid, tau=0.5, reweight=False)
    reweight = fm.spectral_refine(grid, tau=0.5, reweight=True)
    assert replace.shape == reweight.shape
    assert not np.allclose(replace, reweight)


def test_temporal_refine_constant_and_spike():
    const = fm.temporal_refine(np.full((1, 1, 2, 8), 3.0), tau=0.1)
    np.testing.assert_allclose(const, 1.0 / 8, atol=1e-12)
    sums = fm.temporal_refine(RNG.standard_normal((2, 3, 4, 8)), tau=0.1).sum(-1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)
    spike = np.zeros((1, 1, 1, 8))
    spike[..., 3] = 1.0
    out = fm.temporal_refine(spike, tau=0.1)
    assert out[0, 0, 0, 3] > 0.99


def test_fuse_boundaries_and_average():
    a = RNG.standard_normal((2, 2, 2, 4))
    b = RNG.standard_normal((2, 2, 2, 4))
    np.testing.assert_allclose(fm.fuse(a, b, 1.0), a, atol=1e-12)
    np.testing.assert_allclose(fm.fuse(a, b, 0.0), b, atol=1e-12)
    np.testing.assert_allclose(fm.fuse(a, b, 0.5), 0.5 * (a + b), atol=1e-12)
    with pytest.raises(ParameterError):
        fm.fuse(a, b[:1], 0.5)
    with pytest.raises(ParameterError):
        fm.fuse(a, b, 1.5)


def test_select_key_patch():
    grid = np.zeros((1, 2, 5, 4))
    grid[0, 0, 3, 1] = 1.0                     # spike in patch 3 of channel 0
    idx = fm.select_key_patch(grid)
    assert idx[0, 0] == 3
    assert idx[0, 1] == 0                      # all-equal energies tie to 0
    rand = RNG.standard_normal((2, 3, 6, 4))
    expected = np.argmax(np.sum(rand * rand, axis=-1), axis=-1)
    np.testing.assert_array_equal(fm.select_key_patch(rand), expected)


def test_patch_refine_shape_preserved():
    params = fm.init_params(TOY, seed=0)
    grid = RNG.standard_normal((2, 4, 7, 8))
    out = fm.patch_refine(ad.Var(grid), params, TOY)
    assert out.shape == grid.shape


def test_fair_block_ablation_routing():
    params = fm.init_params(TOY, seed=0)
    grid = ad.Var(RNG.standard_normal((1, 4, 7, 8)))
    for flags in [(True, True, True), (False, True, True), (True, False, True),
                  (True, True, False), (False, False, False)]:
        cfg = fm.FairConfig(n_channels=4, n_regions=8, n_timepoints=32,
                            patch_len=8, overlap=4, attention_dim=4,
                            mlp_hidden=8, use_spectral=flags[0],
                            use_temporal=flags[1], use_patch=flags[2])
        out = fm.fair_block(grid, params, cfg)
        data = out.data if isinstance(out, ad.Var) else out
        assert data.shape == grid.shape


# ---------------------------------------------------------------------------
# forward / loss


def test_forward_output_shape_and_trace():
    params = fm.init_params(TOY, seed=1)
    X = RNG.standard_normal((4, 32))
    s_hat, trace = fm.forward(X, params, TOY, return_trace=True)
    assert s_hat.shape == (8, 32)
    assert trace.key_indices.shape == (1, 4)
    assert trace.P_S.shape == trace.P.shape == trace.P_L.shape
    batched = fm.forward(np.stack([X, X]), params, TOY)
    assert batched.shape == (2, 8, 32)
    np.testing.assert_allclose(batched.data[0], batched.data[1], atol=1e-12)
    np.testing.assert_allclose(batched.data[0], s_hat.data, atol=1e-10)


def test_forward_rejects_wrong_dims():
    params = fm.init_params(TOY, seed=1)
    with pytest.raises(ParameterError):
        fm.forward(RNG.standard_normal((5, 32)), params, TOY)
    with pytest.raises(ParameterError):
        fm.forward(RNG.standard_normal((4, 30)), params, TOY)


def test_forward_scale_equivariance_of_magnitude():
    # max-abs normalization in, restored scale out: scaling X scales S_hat
    params = fm.init_params(TOY, seed=2)
    X = RNG.standard_normal((4, 32))
    a = fm.forward(X, params, TOY).data
    b = fm.forward(10.0 * X, params, TOY).data
    np.testing.assert_allclose(b, 10.0 * a, rtol=1e-9)


def test_loss_examples():
    s = np.zeros((8, 4))
    assert float(fm.loss(ad.Var(s), s).data) == 0.0
    s_hat = s.copy()
    s_hat[0, 0] = 2.0
    assert float(fm.loss(ad.Var(s_hat), s).data) == pytest.approx(0.5)
    a = RNG.standard_normal((8, 6))
    b = RNG.standard_normal((8, 6))
    oracle = sum((a[i, t] - b[i, t]) ** 2 for i in range(8) for t in range(6)) / 8
    assert float(fm.loss(ad.Var(a), b).data) == pytest.approx(oracle, abs=1e-9)
    with pytest.raises(ParameterError):
        fm.loss(ad.Var(a), b[:4])


def test_end_to_end_gradient_check():
    params = fm.init_params(TOY, seed=3)
    names = sorted(params)
    X = RNG.standard_normal((4, 32))
    S = RNG.standard_normal((8, 32))

    def f(*vs):
        pv = dict(zip(names, vs))
        return fm.loss(fm.forward(X, pv, TOY), S)

    err = ad.grad_check(f, [params[n] for n in names], h=1e-5,
                        max_coords_per_input=2, seed=0)
    assert err < 1e-3


def test_single_adam_step_decreases_loss():
    # invariant: one step at lr=1e-3 strictly improves a single sample,
    # across 20 random initializations with zero allowed failures
    X = RNG.standard_normal((4, 32))
    S = 0.5 * RNG.standard_normal((8, 32))
    for seed in range(20):
        params = fm.init_params(TOY, seed=seed)
        pvars = fm._as_param_vars(params)
        lv = fm.loss(fm.forward(X, pvars, TOY), S)
        lv.backward()
        grads = {k: v.grad if v.grad is not None else np.zeros_like(v.data)
                 for k, v in pvars.items()}
        state = AdamState(lr=1e-3, weight_decay=0.0)
        adam_step(state, params, grads)
        after = float(fm.loss(fm.forward(X, params, TOY), S).data)
        assert after < float(lv.data), f"seed {seed}: {after} >= {float(lv.data)}"


# ---------------------------------------------------------------------------
# checkpoints / training


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    space = build_synthetic_source_space(8, 2, seed=0)
    lf = build_lead_field(space, 4, seed=1)
    cfg = SimulationConfig(snr_db=5.0, n_sources=1, extent=1, n_timepoints=32,
                           sample_rate=100.0, seed=0)
    manifest = generate_dataset(space, lf, [cfg], 24, root, seed_base=77)
    return load_manifest(manifest)


def test_checkpoint_round_trip(tmp_path):
    params = fm.init_params(TOY, seed=4)
    state = AdamState(lr=3e-4)
    fm.save_checkpoint(tmp_path / "ck", params, TOY, state, epoch=7)
    back_params, back_cfg, epoch, back_state = fm.load_checkpoint(tmp_path / "ck")
    assert back_cfg == TOY
    assert epoch == 7
    assert back_state.lr == 3e-4
    X = RNG.standard_normal((4, 32))
    a = fm.forward(X, params, TOY).data
    b = fm.forward(X, back_params, back_cfg).data
    np.testing.assert_allclose(a, b, atol=1e-4)   # f32 storage


def test_train_best_val_monotone(tiny_dataset, tmp_path):
    res = fm.train(tiny_dataset, TOY, epochs=5, seed=0, out_dir=tmp_path)
    assert len(res.history) == 5
    best_so_far = float("inf")
    recorded_best = []
    for _, _, val, _ in res.history:
        best_so_far = min(best_so_far, val)
        recorded_best.append(best_so_far)
    assert recorded_best == sorted(recorded_best, reverse=True)
    assert res.best_val == pytest.approx(best_so_far)
    assert (res.checkpoint_dir / "model.json").exists()
    assert res.log_path.exists()


def test_train_plateau_halves_lr(tiny_dataset, tmp_path, monkeypatch):
    monkeypatch.setattr(fm, "evaluate_loss", lambda *a, **k: 1.0)
    res = fm.train(tiny_dataset, TOY, epochs=5, seed=0, out_dir=tmp_path,
                   plateau_patience=3)
    lrs = [h[3] for h in res.history]
    assert lrs[:4] == [TOY.lr] * 4            # stall counts epochs 2-4
    assert lrs[4] == pytest.approx(TOY.lr / 2)


def test_train_lr_floor(tiny_dataset, tmp_path, monkeypatch):
    monkeypatch.setattr(fm, "evaluate_loss", lambda *a, **k: 1.0)
    res = fm.train(tiny_dataset, TOY, epochs=6, seed=0, out_dir=tmp_path,
                   plateau_patience=1, lr_floor=TOY.lr / 2)
    assert min(h[3] for h in res.history) >= TOY.lr / 2


def test_train_determinism(tiny_dataset, tmp_path):
    r1 = fm.train(tiny_dataset, TOY, epochs=2, seed=5, out_dir=tmp_path / "a")
    r2 = fm.train(tiny_dataset, TOY, epochs=2, seed=5, out_dir=tmp_path / "b")
    assert r1.history == r2.history
    assert r1.log_path.read_bytes() == r2.log_path.read_bytes()


def test_train_resume_continues_epochs(tiny_dataset, tmp_path):
    r1 = fm.train(tiny_dataset, TOY, epochs=2, seed=6, out_dir=tmp_path)
    params, cfg, _, state = fm.load_checkpoint(r1.checkpoint_dir)
    r2 = fm.train(tiny_dataset, cfg, epochs=1, seed=6, out_dir=tmp_path,
                  start_epoch=r1.history[-1][0], params=params, adam_state=state)
    assert r2.history[0][0] == 3
    lines = r1.log_path.read_text().strip().splitlines()
    assert lines[0].startswith("epoch")
    assert len(lines) == 4                    # header + 3 epochs appended


def test_train_divergence_raises(tiny_dataset, tmp_path):
    params = fm.init_params(TOY, seed=0)
    params["head.res_w"][:] = np.nan
    with pytest.raises(DivergenceError):
        fm.train(tiny_dataset, TOY, epochs=1, seed=0, out_dir=tmp_path,
                 params=params)


def test_train_missing_split_raises(tmp_path):
    from esikit.errors import DataError

    with pytest.raises(DataError):
        fm.train([], TOY, epochs=1, seed=0, out_dir=tmp_path)
