import dataclasses
import json

import numpy as np
import pytest

from normlab.errors import CorruptDataset, DegenerateBatch
from normlab.harness.cli import cli
from normlab.harness.config import (
    ConfigError,
    NormSpec,
    StatDiffConfig,
    SweepConfig,
    SyntheticSpec,
    TrainConfig,
    from_dict,
    load_config,
    to_dict,
)
from normlab.harness.data import (
    RECORD_BYTES,
    TEST_FILES,
    TRAIN_FILES,
    augment,
    load_cifar10,
    parse_records,
    serialize_records,
    synthetic_dataset,
)
from normlab.harness.experiments import (
    SweepResult,
    cell_config,
    run_singularity_sweep,
    run_statdiff_trace,
    sweep_summary,
)
from normlab.harness.train import evaluate, load_checkpoint, load_data, sample_fixed_stats, train
from normlab.optim import SgdConfig


def tiny(kind="bn", **kw):
    syn = kw.pop("synthetic", SyntheticSpec(10, 10, 5, 16, 4.0, 0))
    base = dict(model="plain4", width=8, norm=NormSpec(kind), epochs=2, batch_size=16,
                sgd=SgdConfig(0.05, 0.9, 5e-4), dataset="synthetic", augment=False, synthetic=syn)
    base.update(kw)
    return TrainConfig(**base)


# CIFAR-10 binary format

def _two_records():
    labels = np.array([3, 9], dtype=np.uint8)
    pixels = np.arange(2 * 3072, dtype=np.int64).reshape(2, 3, 32, 32) % 256
    return labels, pixels.astype(np.uint8)


def test_binary_round_trip():
    labels, pixels = _two_records()
    blob = bytes([3]) + bytes(i % 256 for i in range(3072)) + bytes([9]) + bytes((3072 + i) % 256 for i in range(3072))
    assert serialize_records(labels, pixels) == blob
    got_l, got_p = parse_records(blob)
    assert got_l.tolist() == [3, 9]
    assert got_p[0, 0, 0, :3].tolist() == [0, 1, 2]
    assert got_p[1, 2, 31, 31] == (2 * 3072 - 1) % 256
    np.testing.assert_array_equal(got_p, pixels)


@pytest.mark.parametrize("blob", [b"", b"\x00" * (RECORD_BYTES - 1), b"\x0a" + b"\x00" * (RECORD_BYTES - 1)])
def test_corrupt_blobs(blob):
    with pytest.raises(CorruptDataset):
        parse_records(blob)


def test_load_cifar10_from_directory(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    for i, name in enumerate(TRAIN_FILES + TEST_FILES):
        labels = rng.integers(0, 10, 4).astype(np.uint8)
        pixels = rng.integers(0, 256, (4, 3, 32, 32)).astype(np.uint8)
        (tmp_path / name).write_bytes(serialize_records(labels, pixels))
    monkeypatch.setenv("NORMLAB_DATA", str(tmp_path))
    train_set, test_set = load_cifar10()
    assert len(train_set) == 20 and len(test_set) == 4
    np.testing.assert_allclose(train_set.images.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(train_set.images.std(axis=(0, 2, 3)), 1, atol=1e-4)


def test_missing_cifar_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path)


# synthetic data and augmentation

def test_synthetic_reproducible():
    a, _ = synthetic_dataset(SyntheticSpec(seed=3, image_size=8))
    b, _ = synthetic_dataset(SyntheticSpec(seed=3, image_size=8))
    assert a.images.tobytes() == b.images.tobytes()
    assert np.bincount(a.labels).tolist() == [20] * 10


def test_two_class_high_snr_learnable():
    cfg = tiny(synthetic=SyntheticSpec(2, 20, 10, 16, 50.0, 1), epochs=5, batch_size=8)
    assert train(cfg).final_train_acc == 1.0


def test_zero_snr_is_chance():
    cfg = tiny(synthetic=SyntheticSpec(10, 10, 60, 16, 0.0, 2), epochs=3)
    acc = train(cfg).final_test_acc
    assert abs(acc - 0.1) <= 0.07


def test_augment_keeps_shape_and_is_seeded():
    x = np.random.default_rng(0).standard_normal((4, 3, 8, 8))
    a = augment(x, np.random.default_rng(1))
    b = augment(x, np.random.default_rng(1))
    assert a.shape == x.shape and a.tobytes() == b.tobytes()


# fixed statistics sampling

def test_zero_sigmas_give_bn_targets():
    fs = sample_fixed_stats(16, 0.0, 0.0, seed=1)
    assert np.all(fs.mu_hat == 0) and np.all(fs.sigma_hat == 1)


def test_sigma_hat_positive_and_mu_spread():
    fs = sample_fixed_stats(100_000, 3.0, 3.0, seed=0)
    assert np.all(fs.sigma_hat > 0)
    assert abs(fs.mu_hat.std() - 3.0) <= 0.02 * 3.0
    assert abs(np.log(fs.sigma_hat).std() - 3.0) <= 0.02 * 3.0


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        sample_fixed_stats(4, -1.0, 0.0)


# training loop

def test_zero_lr_constant_loss():
    cfg = tiny("gn", sgd=SgdConfig(0.0, 0.9, 5e-4), epochs=3)
    losses = [e.loss for e in train(cfg).curves]
    np.testing.assert_allclose(losses, losses[0], rtol=1e-12)


def test_same_seed_same_curves():
    cfg = tiny("bn", augment=True)
    a, b = train(cfg), train(cfg)
    assert [dataclasses.astuple(e) for e in a.curves] == [dataclasses.astuple(e) for e in b.curves]
    c = train(dataclasses.replace(cfg, seed=1))
    assert [e.loss for e in c.curves] != [e.loss for e in a.curves]


def test_bn_reaches_high_train_accuracy():
    cfg = tiny("bn", width=16, sgd=SgdConfig(0.1, 0.9, 5e-4), epochs=10,
               synthetic=SyntheticSpec(10, 20, 10, 16, 4.0, 0))
    assert train(cfg).final_train_acc >= 0.99


def test_divergence_is_recorded(monkeypatch):
    import importlib

    train_mod = importlib.import_module("normlab.harness.train")

    real = train_mod.softmax_xent
    calls = []

    def blow_up(logits, labels):
        loss, grad = real(logits, labels)
        calls.append(1)
        return (float("nan") if len(calls) > 3 else loss), grad

    monkeypatch.setattr(train_mod, "softmax_xent", blow_up)
    run = train(tiny("bn", epochs=3))
    assert run.diverged and run.final_test_acc == 0.0 and "non-finite" in run.error


def test_batch_size_one_bn_raises():
    with pytest.raises(DegenerateBatch):
        train(tiny("bn", batch_size=1, epochs=1))


@pytest.mark.parametrize("kind", ["ln", "gn", "in", "fixed", "bcn-large", "bcn-micro"])
def test_every_normalizer_trains(kind):
    norm = NormSpec(kind, groups=2, sigma_mu=1.0, sigma_sigma=0.5)
    run = train(tiny(norm=norm, epochs=1))
    assert not run.diverged and len(run.curves) == 1


def test_miniresnet_with_ws_trains():
    run = train(tiny(model="miniresnet", depth=1, norm=NormSpec("gn", ws=True), epochs=1))
    assert np.isfinite(run.curves[0].loss)


def test_run_artifacts_and_checkpoint(tmp_path):
    cfg = tiny("bn")
    run = train(cfg, out_dir=tmp_path)
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_err,test_err" and len(lines) == 3
    assert json.loads((tmp_path / "summary.json").read_text())["final_test_acc"] == run.final_test_acc
    model, cfg2, _, _ = load_checkpoint(tmp_path / "checkpoint.npz")
    assert cfg2 == cfg
    _, test = load_data(cfg)
    assert evaluate(model, test) == pytest.approx(run.final_test_acc, abs=1e-12)


# sweep

def test_zero_cell_is_bn_training():
    base = tiny("bn")
    bn_run = train(base)
    cell = train(cell_config(base, 0.0, 0.0, base.seed))
    assert [dataclasses.astuple(e) for e in cell.curves] == [dataclasses.astuple(e) for e in bn_run.curves]


def test_failure_flag():
    sweep = SweepConfig(base=tiny("bn", epochs=1), sigma_mu_grid=[0.0], sigma_sigma_grid=[0.0], seeds=[0])
    assert sweep.threshold == 0.70
    r = SweepResult(1.0, 1.0, 0, 0.69, 0.69 < sweep.threshold)
    assert r.failed and not SweepResult(0, 0, 0, 0.70, 0.70 < 0.70).failed


def test_sweep_csv_is_reproducible(tmp_path):
    cfg = SweepConfig(base=tiny("bn", epochs=1), sigma_mu_grid=[0.0, 2.0], sigma_sigma_grid=[1.0], seeds=[0])
    res = run_singularity_sweep(cfg, tmp_path / "a")
    run_singularity_sweep(cfg, tmp_path / "b")
    text = (tmp_path / "a" / "sweep.csv").read_text()
    assert text == (tmp_path / "b" / "sweep.csv").read_text()
    assert text.splitlines()[0] == "sigma_mu,sigma_sigma,seed,accuracy,failed,distance"
    assert len(text.splitlines()) == 3
    assert [(r.sigma_mu, r.sigma_sigma) for r in res] == [(0.0, 1.0), (2.0, 1.0)]


def test_sweep_summary_spearman():
    rs = [SweepResult(m, s, 0, 1.0 - 0.1 * (m + s), False) for m in (0, 1, 2) for s in (0, 1, 2)]
    assert sweep_summary(rs, 0.7)["spearman_accuracy_vs_distance"] < -0.9


# statdiff trace

def test_statdiff_trace_with_bn_control(tmp_path):
    base = tiny(model="miniresnet", depth=1, epochs=2, batch_size=8)
    cfg = StatDiffConfig(base=base, normalizers=[NormSpec("gn", groups=4), NormSpec("ln", ws=True)])
    runs = run_statdiff_trace(cfg, tmp_path, extra=[NormSpec("bn")])
    assert list(runs) == ["gn", "ln+ws", "bn"]
    assert all(len(r.statdiff) == 2 for r in runs.values())
    assert max(r.mean_over_groups for r in runs["bn"].statdiff) <= 1e-3
    rows = (tmp_path / "gn" / "statdiff.csv").read_text().splitlines()
    assert rows[0] == "epoch,layer,group,statdiff"


# configuration

def test_unknown_config_key_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        from_dict(TrainConfig, {"norm": {"kind": "gn", "bogus": 1}})
    with pytest.raises(ConfigError):
        from_dict(TrainConfig, {"norm": {"kind": "batchnorm"}})
    with pytest.raises(ConfigError):
        from_dict(TrainConfig, {"epochs": "ten"})


def test_config_round_trip(tmp_path):
    cfg = SweepConfig(base=tiny("fixed"), seeds=[4])
    p = tmp_path / "c.json"
    p.write_text(json.dumps(to_dict(cfg)))
    assert load_config(SweepConfig, p) == cfg


# command line

def _write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(to_dict(obj)))
    return str(p)


def test_cli_gradcheck(capsys):
    assert cli(["gradcheck", "--seeds", "1"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_cli_usage_errors(tmp_path, capsys):
    assert cli(["frobnicate"]) == 2
    assert cli(["train"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert cli(["train", "--config", str(bad)]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_runtime_failure(tmp_path):
    cfg = _write(tmp_path, "c.json", dataclasses.replace(tiny("bn"), dataset="cifar10", data_dir=str(tmp_path)))
    assert cli(["train", "--config", cfg]) == 1


def test_cli_train_then_probe(tmp_path, capsys):
    cfg = _write(tmp_path, "c.json", tiny("bn", epochs=1))
    assert cli(["train", "--config", cfg, "--out", str(tmp_path / "run"), "--seed", "3"]) == 0
    assert json.loads((tmp_path / "run" / "summary.json").read_text())["config"]["seed"] == 3
    assert cli(["probe", "--checkpoint", str(tmp_path / "run" / "checkpoint.npz"), "--out", str(tmp_path / "p")]) == 0
    report = json.loads((tmp_path / "p" / "probe.json").read_text())
    assert len(report["layers"]) == 4


def test_cli_sweep_single_cell(tmp_path):
    sweep = SweepConfig(base=tiny("bn", epochs=1), sigma_mu_grid=[1.0], sigma_sigma_grid=[1.0], seeds=[0])
    cfg = _write(tmp_path, "s.json", sweep)
    assert cli(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    assert len((tmp_path / "s" / "sweep.csv").read_text().splitlines()) == 2


def test_cli_statdiff(tmp_path):
    trace = StatDiffConfig(base=tiny(model="miniresnet", depth=1, epochs=1, batch_size=8),
                           normalizers=[NormSpec("gn", groups=2)])
    cfg = _write(tmp_path, "t.json", trace)
    assert cli(["statdiff", "--config", cfg, "--bn-control", "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "bn" / "statdiff.csv").exists()


def test_ws_defaults_on_for_bcn_only():
    assert NormSpec("bcn-micro").use_ws and NormSpec("bcn-large").label == "bcn-large+ws"
    assert not NormSpec("gn").use_ws and NormSpec("gn").label == "gn"
    assert not NormSpec("bcn-micro", ws=False).use_ws
