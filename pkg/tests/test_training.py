import json

import numpy as np
import pytest

from semlab.checkpoint import load_checkpoint, save_checkpoint
from semlab.errors import ArtifactMismatchError, ConfigurationError
from semlab.pathstar import build_dataset, load_samples, load_vocab
from semlab.tensor import Parameter
from semlab.training import RunConfig, Trainer, export_curves_csv, METRICS_FIELDS


def _dataset(tmp_path, d=2, l=3, n_train=48, n_test=16, seed=5):
    out = tmp_path / "data"
    build_dataset(d, l, n_train=n_train, n_test=n_test, seed=seed, out_dir=out)
    return out


def _config(data_dir, out_dir=None, **kw):
    defaults = dict(
        data_dir=str(data_dir), objective="standard", n_layers=1, n_heads=2,
        d_model=16, d_ff=32, dtype="float64", k=2, latent_dim=8, dec_layers=1,
        lr=1e-3, warmup_steps=2, batch_size=16, max_epochs=2, eval_subset=0,
        seed=3, out_dir=str(out_dir) if out_dir else "",
    )
    defaults.update(kw)
    return RunConfig(**defaults)


def test_run_config_roundtrip_and_hash():
    config = RunConfig(objective="pause", k=3)
    again = RunConfig.from_dict(config.to_dict())
    assert again == config
    assert again.config_hash() == config.config_hash()
    other = RunConfig(objective="pause", k=4)
    assert other.config_hash() != config.config_hash()


def test_trainer_runs_and_writes_artifacts(tmp_path):
    data = _dataset(tmp_path)
    run_dir = tmp_path / "run"
    trainer = Trainer(_config(data, run_dir))
    summary = trainer.train()
    assert summary["steps"] == 2 * 3  # 48/16 batches * 2 epochs
    assert (run_dir / "metrics.jsonl").exists()
    assert (run_dir / "run_config.json").exists()
    assert not (run_dir / ".lock").exists()  # released
    ckpts = sorted((run_dir / "checkpoints").glob("*.ckpt"))
    assert len(ckpts) == 2  # one per epoch-end eval point
    records = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert [r["split"] for r in records] == ["test", "test", "test_full"]
    steps = [r["step"] for r in records]
    assert steps == sorted(steps)


def test_same_seed_bit_identical_loss_trajectory(tmp_path):
    data = _dataset(tmp_path)
    losses = []
    for _ in range(2):
        trainer = Trainer(_config(data))
        run = []
        order = trainer._epoch_order(0)
        for lo in range(0, 48, 16):
            batch = [trainer.train_samples[i] for i in order[lo:lo + 16]]
            run.append(trainer.train_step(batch)["total"])
        losses.append(run)
    assert losses[0] == losses[1]  # bit-identical, no tolerance


def test_different_seed_changes_trajectory(tmp_path):
    data = _dataset(tmp_path)
    t1 = Trainer(_config(data, seed=3))
    t2 = Trainer(_config(data, seed=4))
    b1 = [t1.train_samples[i] for i in t1._epoch_order(0)[:16]]
    b2 = [t2.train_samples[i] for i in t2._epoch_order(0)[:16]]
    assert t1.train_step(b1)["total"] != t2.train_step(b2)["total"]


def test_resume_matches_uninterrupted_run(tmp_path):
    data = _dataset(tmp_path)
    full_dir = tmp_path / "full"
    trainer = Trainer(_config(data, full_dir, max_epochs=3))
    trainer.train()
    full_records = [json.loads(x) for x in (full_dir / "metrics.jsonl").read_text().splitlines()]

    part_dir = tmp_path / "part"
    part = Trainer(_config(data, part_dir, max_epochs=1))
    part.train()
    first = sorted((part_dir / "checkpoints").glob("step_*.ckpt"))[0]

    resumed_dir = tmp_path / "resumed"
    resumed = Trainer.resume(first, out_dir=resumed_dir)
    resumed.config.max_epochs = 3
    resumed.train()
    resumed_records = [json.loads(x) for x in (resumed_dir / "metrics.jsonl").read_text().splitlines()]

    full_tail = [r for r in full_records if r["step"] > part.step and r["split"] == "test"]
    resumed_tail = [r for r in resumed_records if r["split"] == "test"]
    assert len(full_tail) == len(resumed_tail) == 2
    for a, b in zip(full_tail, resumed_tail):
        for key in METRICS_FIELDS:
            if key == "wall_time":
                continue  # informational only
            assert a[key] == b[key], f"{key} drifted on resume"


def test_lock_file_blocks_concurrent_runs(tmp_path):
    data = _dataset(tmp_path)
    run_dir = tmp_path / "locked"
    run_dir.mkdir()
    (run_dir / ".lock").write_text("999")
    trainer = Trainer(_config(data, run_dir))
    with pytest.raises(ConfigurationError, match="locked"):
        trainer.train()


def test_export_curves_schema(tmp_path):
    data = _dataset(tmp_path)
    run_dir = tmp_path / "run"
    Trainer(_config(data, run_dir)).train()
    csv_text = export_curves_csv(run_dir)
    header = csv_text.splitlines()[0]
    assert header == "step,epoch,split,lm,ae,rp,total,exact_match,first_node_acc,continuation_acc,wall_time"
    assert len(csv_text.splitlines()) == 4  # header + 2 evals + final


def test_export_curves_empty_dir_message(tmp_path):
    with pytest.raises(ConfigurationError, match="no metrics stream"):
        export_curves_csv(tmp_path)


def test_checkpoint_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = [Parameter(rng.normal(size=(3, 4)).astype(np.float32), name="a.w"),
              Parameter(rng.normal(size=(5,)), name="b.v")]
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, params, None, {"config": {}}, {"step": 7})
    ckpt = load_checkpoint(path)
    assert ckpt.counters["step"] == 7
    fresh = [Parameter(np.zeros((3, 4), np.float32), name="a.w"),
             Parameter(np.zeros(5), name="b.v")]
    ckpt.restore_params(fresh)
    np.testing.assert_array_equal(fresh[0].data, params[0].data)  # bit-exact via f64
    np.testing.assert_array_equal(fresh[1].data, params[1].data)


def test_checkpoint_missing_param_rejected(tmp_path):
    params = [Parameter(np.zeros(3), name="a")]
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, params, None, {"config": {}}, {"step": 0})
    with pytest.raises(ArtifactMismatchError, match="lacks"):
        load_checkpoint(path).restore_params([Parameter(np.zeros(3), name="zzz")])


def test_checkpoint_forward_compatible_ignores_extras(tmp_path):
    params = [Parameter(np.ones(3), name="a"), Parameter(np.ones(2), name="old_extra")]
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, params, None, {"config": {}}, {"step": 0})
    target = [Parameter(np.zeros(3), name="a")]
    load_checkpoint(path).restore_params(target)  # unknown blob ignored
    np.testing.assert_array_equal(target[0].data, np.ones(3))


def test_eval_subset_and_full_eval(tmp_path):
    data = _dataset(tmp_path)
    config = _config(data, eval_subset=4)
    trainer = Trainer(config)
    report = trainer.evaluate(subset=4)
    assert report.n_evaluated == 4
    assert trainer.evaluate().n_evaluated == 16
