import numpy as np
import pytest

from piwm.collect import (Dataset, DatasetManifest, Episode, MctsConfig,
                          run_episode)
from piwm.nn import Denoiser, DenoiserConfig, load_weights, save_weights
from piwm.nn.edm import EdmParams
from piwm.train import (AdamState, TrainConfig, make_batch, sample_noise_level,
                        sample_segment, train, training_step)
from piwm.sim import SimConfig


def synth_episode(t, seed=0, h=32, w=64):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, (t, h, w, 3), dtype=np.uint8)
    actions = (np.arange(t) % 5).astype(np.uint8)
    return Episode(frames=frames, actions=actions, states=[[] for _ in range(t)])


def synth_dataset(lengths, h=32, w=64):
    eps = [synth_episode(t, seed=i, h=h, w=w) for i, t in enumerate(lengths)]
    mf = DatasetManifest(version=1, frame_h=h, frame_w=w, channels=3,
                         episodes=[], color_scheme={})
    return Dataset(manifest=mf, episodes=eps)


@pytest.fixture(scope="module")
def sim_dataset():
    """A tiny dataset of real renders (needed wherever masks are computed)."""
    sim_cfg = SimConfig(npc_count=6)
    mcts = MctsConfig(simulations_per_move=2, max_depth=3)
    eps = [run_episode(sim_cfg, mcts, seed=5, ep_index=i, steps=24, policy="random")
           for i in range(2)]
    mf = DatasetManifest(version=1, frame_h=32, frame_w=64, channels=3,
                         episodes=[], color_scheme={})
    return Dataset(manifest=mf, episodes=eps)


def tiny_dn(mask=1):
    return DenoiserConfig(history_len=4, base_width=8, embed_dim=16,
                          mask_channels=mask, group_size=4)


# ---- segment sampling -----------------------------------------------------------

def test_segment_unique_window_at_minimal_length():
    ds = synth_dataset([5])
    rng = np.random.default_rng(0)
    ctx, acts, target = sample_segment(ds, 4, rng)
    assert np.array_equal(ctx, ds.episodes[0].frames[:4])
    assert np.array_equal(target, ds.episodes[0].frames[4])


def test_segment_alignment_last_action_matches_last_context():
    ds = synth_dataset([30])
    ep = ds.episodes[0]
    rng = np.random.default_rng(1)
    for _ in range(20):
        ctx, acts, target = sample_segment(ds, 4, rng)
        t_end = next(t for t in range(len(ep))
                     if np.array_equal(ep.frames[t], ctx[-1]))
        assert acts[-1] == ep.actions[t_end]
        assert np.array_equal(target, ep.frames[t_end + 1])


def test_segment_two_equal_episodes_binomial():
    ds = synth_dataset([54, 54])  # 50 windows each
    rng = np.random.default_rng(2)
    counts = [0, 0]
    draws = 10_000
    for _ in range(draws):
        ctx, _, _ = sample_segment(ds, 4, rng)
        hit0 = any(np.array_equal(ctx[0], ds.episodes[0].frames[t])
                   for t in range(50))
        counts[0 if hit0 else 1] += 1
    assert abs(counts[0] / draws - 0.5) < 0.03


def test_segment_requires_long_enough_episode():
    ds = synth_dataset([4])
    with pytest.raises(ValueError, match="long enough"):
        sample_segment(ds, 4, np.random.default_rng(0))


def test_segment_never_spans_boundaries():
    ds = synth_dataset([6, 6])
    rng = np.random.default_rng(3)
    f0 = {ds.episodes[0].frames[t].tobytes() for t in range(6)}
    f1 = {ds.episodes[1].frames[t].tobytes() for t in range(6)}
    for _ in range(50):
        ctx, _, target = sample_segment(ds, 4, rng)
        blobs = {f.tobytes() for f in ctx} | {target.tobytes()}
        assert blobs <= f0 or blobs <= f1


# ---- noise level ------------------------------------------------------------------

def test_noise_level_collapses_with_zero_std():
    edm = EdmParams(p_mean=-0.7, p_std=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert sample_noise_level(edm, rng) == pytest.approx(np.exp(-0.7))


def test_noise_level_log_mean_monte_carlo():
    edm = EdmParams()
    rng = np.random.default_rng(1)
    draws = np.array([sample_noise_level(edm, rng) for _ in range(100_000)])
    assert np.all(draws > 0)
    assert abs(np.log(draws).mean() - edm.p_mean) < 0.02


# ---- training step ------------------------------------------------------------------

def test_loss_matches_recomputation_from_logged_tensors(sim_dataset):
    cfg = TrainConfig(steps=1, batch_size=3, mask_mode="soft", seed=0)
    model = Denoiser(tiny_dn(), seed=0)
    opt = AdamState(model, cfg)
    rng = np.random.default_rng(0)
    import piwm.mask as M
    batch = make_batch(sim_dataset, cfg, 4, M.MaskParams(mode="soft"), rng)
    loss, aux = training_step(model, batch, opt, rng)
    recomputed = float(np.mean((aux["pred"] - aux["target"]) ** 2))
    assert loss == pytest.approx(recomputed, rel=1e-6)


def test_corruption_noise_std(sim_dataset):
    import piwm.mask as M
    model = Denoiser(tiny_dn(), seed=0)
    for sigma in (0.1, 1.0, 10.0):
        cfg = TrainConfig(steps=1, batch_size=4, mask_mode="soft",
                          edm=EdmParams(p_mean=float(np.log(sigma)), p_std=1e-12))
        opt = AdamState(model, cfg)
        rng = np.random.default_rng(42)
        batch = make_batch(sim_dataset, cfg, 4, M.MaskParams(mode="soft"), rng)
        _, aux = training_step(model, batch, opt, rng)
        emp = (aux["x_tau"] - batch.targets).std()
        assert abs(emp - sigma) / sigma < 0.05


def test_zero_init_low_sigma_loss_near_zero(sim_dataset):
    import piwm.mask as M
    cfg = TrainConfig(steps=1, batch_size=2, mask_mode="soft",
                      edm=EdmParams(p_mean=float(np.log(1e-3)), p_std=1e-12))
    model = Denoiser(tiny_dn(), seed=0)
    opt = AdamState(model, cfg)
    rng = np.random.default_rng(0)
    batch = make_batch(sim_dataset, cfg, 4, M.MaskParams(mode="soft"), rng)
    loss, _ = training_step(model, batch, opt, rng)
    assert loss < 1e-5


def test_nonfinite_loss_aborts_with_diagnostic(sim_dataset):
    import piwm.mask as M
    cfg = TrainConfig(steps=1, batch_size=2, mask_mode="soft")
    model = Denoiser(tiny_dn(), seed=0)
    model.params["stem.w"].data[:] = np.nan
    opt = AdamState(model, cfg)
    rng = np.random.default_rng(0)
    batch = make_batch(sim_dataset, cfg, 4, M.MaskParams(mode="soft"), rng)
    with pytest.raises(FloatingPointError, match="step"):
        training_step(model, batch, opt, rng)


# ---- full loop ------------------------------------------------------------------------

def test_train_determinism_and_ema_zero(sim_dataset, tmp_path):
    cfg = TrainConfig(steps=6, batch_size=2, mask_mode="none", seed=3,
                      ema_decay=0.0, log_every=1)
    r1 = train(sim_dataset, cfg, tmp_path / "a.pw", dn_config=tiny_dn(mask=0))
    r2 = train(sim_dataset, cfg, tmp_path / "b.pw", dn_config=tiny_dn(mask=0))
    assert r1.losses == r2.losses
    assert (tmp_path / "a.pw").read_bytes() == (tmp_path / "b.pw").read_bytes()
    # ema_decay=0: shadow equals parameters, so saved EMA model == checkpointed raw
    from piwm.train import load_checkpoint
    _, _, _, tensors = load_checkpoint(r1.ckpt_path)
    saved = load_weights(r1.model_path)
    for k, p in saved.params.items():
        assert np.array_equal(p.data, tensors[f"param.{k}"])


def test_train_steps_zero_equals_initialization(sim_dataset, tmp_path):
    cfg = TrainConfig(steps=0, batch_size=2, mask_mode="none", seed=9)
    res = train(sim_dataset, cfg, tmp_path / "init.pw", dn_config=tiny_dn(mask=0))
    fresh = Denoiser(tiny_dn(mask=0), seed=9, sigma_data=cfg.edm.sigma_data)
    save_weights(fresh, tmp_path / "fresh.pw")
    assert (tmp_path / "init.pw").read_bytes() == (tmp_path / "fresh.pw").read_bytes()


def test_train_resume_matches_uninterrupted(sim_dataset, tmp_path):
    dn = tiny_dn(mask=0)
    full_cfg = TrainConfig(steps=8, batch_size=2, mask_mode="none", seed=4,
                           ckpt_every=4, log_every=1)
    full = train(sim_dataset, full_cfg, tmp_path / "full.pw", dn_config=dn)

    half_cfg = TrainConfig(steps=4, batch_size=2, mask_mode="none", seed=4,
                           ckpt_every=4, log_every=1)
    train(sim_dataset, half_cfg, tmp_path / "half.pw", dn_config=dn)
    resumed = train(sim_dataset, full_cfg, tmp_path / "resumed.pw", dn_config=dn,
                    resume=tmp_path / "half.pw.ckpt")
    assert resumed.losses == full.losses[4:]
    assert (tmp_path / "resumed.pw").read_bytes() == (tmp_path / "full.pw").read_bytes()


def test_mask_ablation_changes_input_channels(sim_dataset, tmp_path):
    cfg_none = TrainConfig(steps=2, batch_size=2, mask_mode="none", seed=0)
    res = train(sim_dataset, cfg_none, tmp_path / "none.pw", dn_config=tiny_dn(mask=0))
    m = load_weights(res.model_path)
    assert m.config.in_channels == 20
    cfg_soft = TrainConfig(steps=2, batch_size=2, mask_mode="soft", seed=0)
    res2 = train(sim_dataset, cfg_soft, tmp_path / "soft.pw", dn_config=tiny_dn(mask=1))
    m2 = load_weights(res2.model_path)
    assert m2.config.in_channels == 21
    with pytest.raises(ValueError):
        train(sim_dataset, cfg_none, tmp_path / "bad.pw", dn_config=tiny_dn(mask=1))


def test_train_rejects_empty_dataset(tmp_path):
    ds = synth_dataset([])
    with pytest.raises(ValueError, match="empty"):
        train(ds, TrainConfig(steps=1), tmp_path / "x.pw")
