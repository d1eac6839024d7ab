"""Config parsing, checkpoints, and the four CLI commands end to end."""

import json

import numpy as np
import pytest

from fscnet import cli
from fscnet import data as D
from fscnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from fscnet.config import ConfigError, ExperimentConfig, config_text, parse_config
from fscnet.layers import FscNet
from fscnet.optim import predict_logits
from fscnet.perturb import PerturbSpec
from fscnet.seeding import rng_for


# ---- config ---------------------------------------------------------------------


def test_config_defaults_round_trip():
    cfg = ExperimentConfig()
    text = config_text(cfg)
    again = parse_config(text)
    assert config_text(again) == text
    assert again.train.learning_rate == 8e-4
    assert again.train.batch_size == 32
    assert again.model.dim == 64
    assert again.augment.mean == (0.485, 0.456, 0.406)


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[train]\nbatchsize = 32\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        parse_config("[training]\nbatch_size = 32\n")


def test_config_type_errors_are_diagnosed():
    with pytest.raises(ConfigError, match=r"\[train\] batch_size"):
        parse_config("[train]\nbatch_size = many\n")
    with pytest.raises(ConfigError):
        parse_config("[train]\nbatch_size = 0\n")


def test_config_image_size_drives_augment_target():
    cfg = parse_config("[train]\nimage_size = 62\n")
    assert cfg.augment.target_size == 62


def test_config_flag_overrides():
    cfg = ExperimentConfig()
    out = cli._config_from_args(_Args(config="", dim=16, image_size=48))
    assert out.model.dim == 16
    assert out.train.image_size == 48
    assert out.augment.target_size == 48
    assert out.train.batch_size == cfg.train.batch_size  # untouched default


class _Args:
    """argparse.Namespace stand-in with absent flags reading as None."""

    def __init__(self, **kw):
        self.__dict__.update(kw)

    def __getattr__(self, name):
        return None


# ---- checkpoint -----------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a.weight": rng.normal(size=(3, 2)).astype(np.float32),
        "a.bias": rng.normal(size=3).astype(np.float32),
        "bn.running_mean": rng.normal(size=3).astype(np.float32),
    }
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tensors, "[model]\ndim = 64\n", 0.123)
    ck = load_checkpoint(path)
    assert ck.version == 1
    assert ck.best_val_loss == 0.123
    assert ck.config_text == "[model]\ndim = 64\n"
    assert list(ck.tensors) == list(tensors)  # order preserved
    for name in tensors:
        assert np.array_equal(ck.tensors[name], tensors[name])
        assert ck.tensors[name].dtype == np.float32


def test_checkpoint_optimizer_state_round_trip(tmp_path):
    t = {"w": np.ones(4, dtype=np.float32)}
    opt = {"step_count": 17, "lr": 8e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
           "m": {"w": np.full(4, 0.5, dtype=np.float32)},
           "v": {"w": np.full(4, 0.25, dtype=np.float32)}}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, t, "", 1.0, opt)
    ck = load_checkpoint(path)
    assert ck.optimizer["step_count"] == 17
    assert np.array_equal(ck.optimizer["m"]["w"], opt["m"]["w"])
    assert np.array_equal(ck.optimizer["v"]["w"], opt["v"]["w"])


def test_checkpoint_rejects_foreign_files(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"PK\x03\x04 definitely not ours")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)


def test_checkpoint_rejects_future_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.zeros(1, dtype=np.float32)}, "", 0.0)
    blob = bytearray(path.read_bytes())
    blob[4] = 99  # bump the version field
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


# ---- synth + count-params commands ------------------------------------------------


def test_cmd_synth_writes_loadable_dataset(tmp_path):
    out = tmp_path / "ds"
    paths = cli.cmd_synth(6, 16, seed=5, out_dir=out, quiet=True)
    assert len(paths) == 12
    records, skipped = D.load_directory(out)
    assert skipped == []
    labels = [r.label for r in records]
    assert labels.count(0) == 6 and labels.count(1) == 6


def test_cmd_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.cmd_synth(3, 16, seed=9, out_dir=a, quiet=True)
    cli.cmd_synth(3, 16, seed=9, out_dir=b, quiet=True)
    for p in sorted(a.iterdir()):
        assert p.read_bytes() == (b / p.name).read_bytes()


def test_cmd_count_params_matches_closed_form(capsys):
    cfg = ExperimentConfig()
    cfg.model.dim = 64
    total = cli.cmd_count_params(cfg)
    assert total == 266_513 + 243 * 64
    out = capsys.readouterr().out
    assert "282,065" in out
    assert "216,270" in out  # the unreachable quoted figure is called out


def test_main_exit_codes(tmp_path, capsys):
    assert cli.main(["count-params", "--dim", "16"]) == 0
    bad_cfg = tmp_path / "bad.ini"
    bad_cfg.write_text("[train]\nbatch_size = nope\n")
    assert cli.main(["count-params", "--config", str(bad_cfg)]) == 1
    assert cli.main(["train", "--root", str(tmp_path / "missing")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["definitely-not-a-command"])
    assert exc.value.code == 1


# ---- training end to end ------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One small training run shared by the eval/replay assertions."""
    base = tmp_path_factory.mktemp("tiny")
    data_dir = base / "data"
    cli.cmd_synth(12, 24, seed=21, out_dir=data_dir, quiet=True)
    cfg = parse_config(
        "[model]\ndim = 8\n"
        "[train]\nimage_size = 24\nbatch_size = 8\naccumulation_steps = 2\n"
        "max_epochs = 2\npatience = 5\nseed = 77\n"
        f"[data]\nroot = {data_dir}\noutput_dir = {base / 'run'}\n"
    )
    report, run_dir = cli.cmd_train(cfg, quiet=True)
    return cfg, report, run_dir, data_dir


def test_train_writes_all_artifacts(tiny_run):
    _, _, run_dir, _ = tiny_run
    for name in ("config.ini", "manifest.tsv", "epochs.log", "metrics.json", "model.ckpt"):
        assert (run_dir / name).exists(), name
    log_lines = (run_dir / "epochs.log").read_text().strip().splitlines()
    assert len(log_lines) == 2
    epoch, train_loss, val_loss = log_lines[0].split("\t")
    assert epoch == "1"
    float(train_loss), float(val_loss)
    record = json.loads((run_dir / "metrics.json").read_text())
    assert set(record["matrix"]) == {"tp", "fp", "tn", "fn"}
    assert record["perturb"] is None


def test_train_is_bit_reproducible(tiny_run, tmp_path):
    cfg, _, run_dir, data_dir = tiny_run
    cfg2 = parse_config(config_text(cfg))
    cfg2.data.output_dir = str(tmp_path / "replay")
    _, run2 = cli.cmd_train(cfg2, quiet=True)
    assert (run_dir / "epochs.log").read_bytes() == (run2 / "epochs.log").read_bytes()
    # identical tensors; the embedded config snapshots differ only in output_dir
    ck1 = load_checkpoint(run_dir / "model.ckpt")
    ck2 = load_checkpoint(run2 / "model.ckpt")
    assert ck1.tensors.keys() == ck2.tensors.keys()
    for name, arr in ck1.tensors.items():
        assert np.array_equal(arr, ck2.tensors[name]), name
    assert ck1.best_val_loss == ck2.best_val_loss
    assert (run_dir / "metrics.json").read_bytes() == (run2 / "metrics.json").read_bytes()


def test_eval_checkpoint_matches_training_report(tiny_run):
    cfg, report, run_dir, data_dir = tiny_run
    rep = cli.cmd_eval(run_dir / "model.ckpt", str(data_dir),
                       manifest_path=run_dir / "manifest.tsv", split="test", quiet=True)
    assert rep == report


def test_eval_deterministic_and_noise_zero_is_clean(tiny_run):
    cfg, _, run_dir, data_dir = tiny_run
    clean1 = cli.cmd_eval(run_dir / "model.ckpt", str(data_dir),
                          manifest_path=run_dir / "manifest.tsv", quiet=True)
    clean2 = cli.cmd_eval(run_dir / "model.ckpt", str(data_dir),
                          manifest_path=run_dir / "manifest.tsv", quiet=True)
    assert clean1 == clean2
    zero_noise = cli.cmd_eval(run_dir / "model.ckpt", str(data_dir),
                              manifest_path=run_dir / "manifest.tsv",
                              spec=PerturbSpec(kind="noise", noise_std=0.0), quiet=True)
    assert zero_noise == clean1


def test_eval_occlusion_records_spec_verbatim(tiny_run, tmp_path):
    cfg, _, run_dir, data_dir = tiny_run
    out = tmp_path / "occl.json"
    spec = PerturbSpec(kind="occlusion", occlusion_fraction=0.10, seed=3)
    cli.cmd_eval(run_dir / "model.ckpt", str(data_dir),
                 manifest_path=run_dir / "manifest.tsv", spec=spec,
                 out_path=str(out), quiet=True)
    record = json.loads(out.read_text())
    assert record["perturb"]["kind"] == "occlusion"
    assert record["perturb"]["occlusion_fraction"] == 0.10
    assert record["perturb"]["seed"] == 3


def test_checkpoint_reload_evaluates_identically(tiny_run):
    cfg, _, run_dir, data_dir = tiny_run
    ck = load_checkpoint(run_dir / "model.ckpt")
    model = FscNet(cfg.model.dim, cfg.model.num_classes, rng=rng_for(0, "reload"))
    model.load_state_dict(ck.tensors)
    records, _ = D.load_directory(data_dir)
    manifest = D.load_manifest(run_dir / "manifest.tsv")
    by_id = {r.id: r for r in records}
    x = np.stack([D.eval_transform(by_id[i], cfg.augment) for i in manifest.test])
    logits_a = predict_logits(model, x)
    model2 = FscNet(cfg.model.dim, cfg.model.num_classes, rng=rng_for(1, "reload2"))
    model2.load_state_dict(load_checkpoint(run_dir / "model.ckpt").tensors)
    logits_b = predict_logits(model2, x)
    assert np.array_equal(logits_a, logits_b)


def test_eval_incompatible_checkpoint_is_named(tiny_run, tmp_path):
    cfg, _, run_dir, data_dir = tiny_run
    ck = load_checkpoint(run_dir / "model.ckpt")
    doctored = {k: v for k, v in ck.tensors.items() if "classifier" not in k}
    bad_path = tmp_path / "bad.ckpt"
    save_checkpoint(bad_path, doctored, ck.config_text, ck.best_val_loss)
    with pytest.raises(CheckpointError, match="dim=8"):
        cli.cmd_eval(bad_path, str(data_dir), quiet=True)


def test_train_bias_perturbation_recomposes_test(tmp_path):
    data_dir = tmp_path / "data"
    cli.cmd_synth(20, 16, seed=31, out_dir=data_dir, quiet=True)
    cfg = parse_config(
        "[model]\ndim = 8\n"
        "[train]\nimage_size = 16\nbatch_size = 14\naccumulation_steps = 1\n"
        "max_epochs = 1\npatience = 3\nseed = 5\n"
        f"[data]\nroot = {data_dir}\noutput_dir = {tmp_path / 'run'}\n"
        "[perturb]\nkind = bias\nbias_positive_fraction = 0.6\nseed = 11\n"
    )
    report, run_dir = cli.cmd_train(cfg, quiet=True)
    m = report.matrix
    positives = m.tp + m.fn
    negatives = m.tn + m.fp
    assert positives == 3 and negatives == 2  # 60/40 of the 5-sample pool (3/2)
    record = json.loads((run_dir / "metrics.json").read_text())
    assert record["perturb"]["kind"] == "bias"
