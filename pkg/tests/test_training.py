import json

import numpy as np
import pytest

from marl_diag import training as training_mod
from marl_diag.checkpoint import load_checkpoint, save_checkpoint
from marl_diag.data import SyntheticConfig, generate_synthetic, split
from marl_diag.errors import (CheckpointFormatError, CheckpointIntegrityError, ConfigError,
                              ShapeMismatchError, TrainingDivergedError)
from marl_diag.model import AgentBundle
from marl_diag.numerics import Tensor
from marl_diag.optim import AdamW, cosine_lr
from marl_diag.training import (RunConfig, bundle_from_checkpoint, pretrain_priors, sync_target, train)

TINY = dict(channels=(4, 8, 8, 8), d=8, heads=2, branch_channels=4, batch_size=16, epochs=2,
            val_resamples=20, test_resamples=20, pretrain_epochs=1)


def tiny_cfg(tmp_path, name="run", **kw):
    return RunConfig(out_dir=str(tmp_path / name), **{**TINY, **kw})


@pytest.fixture(scope="module")
def tiny_splits():
    ds = generate_synthetic(SyntheticConfig(n=96, image_size=16, seed=5))
    return split(ds, (64 / 96, 16 / 96, 16 / 96), 0)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_splits):
    base = tmp_path_factory.mktemp("tiny")
    return train(tiny_cfg(base), splits=tiny_splits)


def _probe_feats(bundle, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 1, 16, 16)).astype(np.float32)
    feats, _, _ = bundle.features(x)
    return {k: Tensor(v.data) for k, v in feats.items()}


# -- target copy --------------------------------------------------------------

def test_target_equals_initialization_before_any_sync(tiny_splits):
    bundle = AgentBundle(RunConfig(**TINY).model_config(5, 16), seed=3)
    for k, t in bundle.diagnostic_params().items():
        np.testing.assert_array_equal(bundle.target[k], t.data)
    assert bundle.syncs == 0


def test_sync_copies_live_params_and_is_idempotent():
    bundle = AgentBundle(RunConfig(**TINY).model_config(5, 16), seed=3)
    feats = _probe_feats(bundle)
    for t in bundle.diagnostic_params().values():
        t.data = t.data + np.float32(0.05)
    live = bundle.diagnose(feats).logits.data
    assert not np.array_equal(bundle.diagnose(feats, use_target=True).logits.data, live)
    sync_target(bundle)
    first = dict(bundle.target)
    np.testing.assert_array_equal(bundle.diagnose(feats, use_target=True).logits.data, live)
    sync_target(bundle)
    for k in first:
        np.testing.assert_array_equal(bundle.target[k], first[k])
    # the copy is detached from later parameter updates
    for t in bundle.diagnostic_params().values():
        t.data = t.data * 0
    np.testing.assert_array_equal(bundle.diagnose(feats, use_target=True).logits.data, live)


def test_target_shapes_match_live():
    bundle = AgentBundle(RunConfig(**TINY).model_config(5, 16), seed=0)
    assert {k: v.shape for k, v in bundle.target.items()} == \
        {k: t.shape for k, t in bundle.diagnostic_params().items()}


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    tensors = {
        "a": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=(2, 2, 2)),
        "c": np.array([7, -1, 2**40], dtype=np.int64),
        "d": np.arange(5, dtype=np.uint8),
        "scalar": np.array(1.5),
        "nan": np.array([np.nan, np.inf, -0.0]),
    }
    meta = {"config": {"seed": 4}, "counters": {"step": 9}}
    save_checkpoint(tmp_path / "x.ckpt", tensors, meta)
    ck = load_checkpoint(tmp_path / "x.ckpt")
    assert ck.meta == meta and ck.version == 1
    assert set(ck.tensors) == set(tensors)
    for k, v in tensors.items():
        assert ck.tensors[k].dtype == v.dtype and ck.tensors[k].shape == v.shape
        assert ck.tensors[k].tobytes() == v.tobytes()


def test_bundle_checkpoint_roundtrip(tiny_run):
    ck = load_checkpoint(tiny_run.run_dir / "checkpoints" / "last.ckpt")
    bundle, stats = bundle_from_checkpoint(ck)
    for k, v in tiny_run.bundle.state_dict().items():
        assert bundle.state_dict()[k].tobytes() == v.tobytes()
    assert stats.mean == tiny_run.stats.mean and stats.std == tiny_run.stats.std
    assert ck.meta["counters"]["step"] == tiny_run.counters.step
    assert any(k.startswith("optim.t.") for k in ck.tensors)


def test_corrupt_magic_is_format_error(tmp_path):
    p = save_checkpoint(tmp_path / "x.ckpt", {"a": np.zeros(3)})
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"JUNK"
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_wrong_version_is_format_error(tmp_path):
    p = save_checkpoint(tmp_path / "x.ckpt", {"a": np.zeros(3)})
    raw = bytearray(p.read_bytes())
    raw[8] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(p)


@pytest.mark.parametrize("cut", [1, 8, 30])
def test_truncated_file_is_integrity_error(tmp_path, cut):
    p = save_checkpoint(tmp_path / "x.ckpt", {"a": np.arange(10.0), "b": np.ones((2, 3))})
    p.write_bytes(p.read_bytes()[:-cut])
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(p)


def test_mismatched_decoder_is_shape_error_naming_tensor(tiny_run):
    state = tiny_run.bundle.state_dict()
    other = AgentBundle(RunConfig(**{**TINY, "ffn_mult": 2}).model_config(5, 16), seed=0)
    with pytest.raises(ShapeMismatchError, match=r"diagnostic\.\S+"):
        other.load_state(state)


def test_width_mismatch_names_both_widths(tmp_path, tiny_splits):
    priors = pretrain_priors(tiny_cfg(tmp_path), tiny_splits[0])
    cfg = tiny_cfg(tmp_path, "wide", d=12)
    with pytest.raises(ShapeMismatchError, match=r"d=8.*d=12"):
        train(cfg, priors=priors, splits=tiny_splits)


# -- optimizer ----------------------------------------------------------------

def test_optimizer_changes_only_params_with_nonzero_grad():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    c = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW({"g": {"a": a, "b": b, "c": c}}, lr=0.1, weight_decay=0.5)
    a.grad = np.full((2, 2), 0.3)
    b.grad = None
    c.grad = np.zeros(3)
    opt.step()
    assert np.all(a.data != 1.0)
    np.testing.assert_array_equal(b.data, np.ones((2, 2)))
    np.testing.assert_array_equal(c.data, np.ones(3))
    assert set(opt.state_dict()) == {"optim.m.a", "optim.v.a", "optim.t.a"}


def test_adamw_first_step_matches_closed_form():
    w = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    bias = Tensor(np.array([0.5]), requires_grad=True)
    opt = AdamW({"g": {"w": w, "bias": bias}}, lr=0.01, weight_decay=0.1, eps=0.0)
    w.grad = np.array([[0.2, -0.4]])
    bias.grad = np.array([3.0])
    opt.step()
    # bias-corrected first step is lr * sign(g), plus decoupled decay on matrices only
    np.testing.assert_allclose(w.data, [[1.0 - 0.01 * (1 + 0.1), -2.0 + 0.01 * (1 + 0.2)]], rtol=1e-12)
    np.testing.assert_allclose(bias.data, [0.5 - 0.01], rtol=1e-12)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0)


# -- training loop ------------------------------------------------------------

def test_run_directory_layout(tiny_run):
    out = tiny_run.run_dir
    echo = json.loads((out / "config.json").read_text())
    assert echo["seed"] == 1 and set(echo["derived_seeds"]) == set(training_mod.SEED_STREAMS)
    for name in ("best.ckpt", "last.ckpt"):
        assert (out / "checkpoints" / name).exists()
    assert (out / "attention" / "posmap.png").exists()
    lines = (out / "metrics.csv").read_text().splitlines()
    head = lines[0].split(",")
    assert head[:2] == ["epoch", "split"] and "mean_auc" in head and "l_td" in head
    assert [l.split(",")[1] for l in lines[1:]] == ["val", "val", "test"]
    report = json.loads((out / "test_report.json").read_text())
    assert report["n"] == 16


def test_update_order_diagnostic_first(tiny_run):
    order = tiny_run.update_order
    assert order == ["diagnostic", "semantic", "visual"] * tiny_run.counters.step


def test_separate_mode_updates_diagnostic_first(tmp_path, tiny_splits):
    r = train(tiny_cfg(tmp_path, epochs=1, update_mode="separate"), splits=tiny_splits, save=False)
    assert r.update_order == ["diagnostic", "semantic", "visual"] * r.counters.step


def test_rl_counters(tiny_run):
    c = tiny_run.counters
    assert c.step == c.episode == 8
    assert c.replay_pushes == 2 * 64
    assert c.target_syncs == c.episode
    assert c.selections == 2 * 64 and 0 < c.explored < c.selections


def test_periodic_target_sync(tmp_path, tiny_splits):
    r = train(tiny_cfg(tmp_path, target_sync=3), splits=tiny_splits, save=False)
    assert r.counters.target_syncs == r.counters.step // 3


def test_model8_reduction_has_no_replay_or_syncs(tmp_path, tiny_splits):
    r = train(tiny_cfg(tmp_path, rl=False), splits=tiny_splits, save=False)
    c = r.counters
    assert c.replay_pushes == 0 and c.target_syncs == 0 and c.replay_updates == 0
    assert c.explored == 0 and c.selections == 0
    assert all(h["l_td"] == 0 and h["l_ptd"] == 0 for h in r.history)


def test_small_replay_skips_update(tmp_path, tiny_splits):
    r = train(tiny_cfg(tmp_path, epochs=1, replay_batch=24), splits=tiny_splits, save=False)
    # 16 transitions after the first step, 32 after the second
    assert r.counters.replay_skips == 1 and r.counters.replay_updates == 3


def test_fixed_seed_runs_are_bit_identical(tmp_path, tiny_splits, tiny_run):
    again = train(tiny_cfg(tmp_path, "again"), splits=tiny_splits)
    a, b = tiny_run.run_dir, again.run_dir
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    ca = load_checkpoint(a / "checkpoints" / "last.ckpt")
    cb = load_checkpoint(b / "checkpoints" / "last.ckpt")
    assert set(ca.tensors) == set(cb.tensors)
    for k in ca.tensors:
        assert ca.tensors[k].tobytes() == cb.tensors[k].tobytes(), k


def test_different_seed_changes_run(tmp_path, tiny_splits, tiny_run):
    other = train(tiny_cfg(tmp_path, seed=2), splits=tiny_splits, save=False)
    assert other.history[0]["loss"] != tiny_run.history[0]["loss"]


def test_refuses_to_overwrite_run(tmp_path, tiny_splits):
    cfg = tiny_cfg(tmp_path, epochs=1)
    train(cfg, splits=tiny_splits)
    with pytest.raises(FileExistsError):
        train(cfg, splits=tiny_splits)
    train(cfg, splits=tiny_splits, overwrite=True)


def test_nan_loss_aborts_with_dump(tmp_path, tiny_splits, monkeypatch):
    real = training_mod.asl_loss
    calls = {"n": 0}

    def poisoned(*args, **kw):
        calls["n"] += 1
        out = real(*args, **kw)
        return out * np.nan if calls["n"] == 6 else out

    monkeypatch.setattr(training_mod, "asl_loss", poisoned)
    cfg = tiny_cfg(tmp_path)
    with pytest.raises(TrainingDivergedError):
        train(cfg, splits=tiny_splits)
    out = tmp_path / "run"
    dump = json.loads((out / "divergence.json").read_text())
    assert dump["counters"]["step"] == 5
    good = load_checkpoint(out / "checkpoints" / "last_good.ckpt")
    assert good.meta["counters"]["step"] == 4
    assert all(np.all(np.isfinite(v)) for v in good.tensors.values())


def test_missing_dataset_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        train(tiny_cfg(tmp_path, data=str(tmp_path / "nowhere")))


def test_config_rejects_unknown_keys_and_roundtrips():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    cfg = RunConfig(**TINY)
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_seed_streams_are_distinct():
    s = RunConfig(seed=1).seeds()
    assert len(set(s.values())) == len(s)
    assert RunConfig(seed=1).seeds() == s != RunConfig(seed=2).seeds()


# -- prior pretraining --------------------------------------------------------

def test_pretrain_is_deterministic_and_priors_only(tmp_path, tiny_splits):
    cfg = tiny_cfg(tmp_path)
    a = pretrain_priors(cfg, tiny_splits[0], tmp_path / "a.ckpt")
    b = pretrain_priors(cfg, tiny_splits[0], tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert all(k.startswith(("semantic.", "visual.")) for k in a.tensors)
    assert a.meta["kind"] == "priors"
    assert set(a.tensors) == set(b.tensors)


def test_matching_priors_transfer_every_tensor(tmp_path, tiny_splits):
    cfg = tiny_cfg(tmp_path)
    priors = pretrain_priors(cfg, tiny_splits[0])
    bundle = AgentBundle(cfg.model_config(5, 16), seed=0)
    assert bundle.load_state(priors.tensors, strict=False, priors_only=True) == []
    for k, v in priors.tensors.items():
        np.testing.assert_array_equal(bundle.named_parameters()[k].data, v)


def test_class_count_change_reinitializes_heads(tmp_path, tiny_splits, caplog):
    domain = generate_synthetic(SyntheticConfig(num_classes=7, n=48, image_size=16, seed=9))
    cfg = tiny_cfg(tmp_path)
    priors = pretrain_priors(cfg, domain)
    bundle = AgentBundle(cfg.model_config(5, 16), seed=0)
    fresh = {k: t.data.copy() for k, t in bundle.named_parameters().items()}
    with caplog.at_level("INFO"):
        reinit = bundle.load_state(priors.tensors, strict=False, priors_only=True)
    assert reinit and all(".head." in k for k in reinit)
    assert any("re-initializing" in r.message for r in caplog.records)
    for k, t in bundle.named_parameters().items():
        if k in reinit or not k.startswith(("semantic.", "visual.")):
            np.testing.assert_array_equal(t.data, fresh[k])
        else:
            np.testing.assert_array_equal(t.data, priors.tensors[k])
    # the whole pipeline accepts the mismatched priors
    train(tiny_cfg(tmp_path, "warm", epochs=1), priors=priors, splits=tiny_splits, save=False)


def test_pretrain_needs_a_prior_agent(tmp_path, tiny_splits):
    with pytest.raises(ConfigError):
        pretrain_priors(tiny_cfg(tmp_path, use_semantic=False, use_visual=False), tiny_splits[0])

