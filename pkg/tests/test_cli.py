import json
import subprocess
import sys

import numpy as np
import pytest

from sgan.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from sgan.imaging import Image, load_image, save_image

TINY_MODEL = dict(image_size=16, base_channels=2, z_dim=8, batch_size=4, epochs=1)


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def cover(tmp_path):
    path = tmp_path / "cover.png"
    save_image(Image(np.random.default_rng(0).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)), path)
    return path


@pytest.fixture
def train_cfg(tmp_path):
    return write_json(tmp_path / "train.json", {"model": {"mode": "gan", **TINY_MODEL}, "corpus_size": 12})


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# embed / extract


def test_embed_extract_roundtrip(tmp_path, cover):
    secret = tmp_path / "secret.bin"
    secret.write_bytes(b"attack at dawn")
    out = tmp_path / "stego.png"
    assert main(["embed", "--in", str(cover), "--out", str(out), "--payload", str(secret), "--seed", "5"]) == EXIT_OK
    assert (tmp_path / "stego.png.manifest.json").exists()
    assert (tmp_path / "stego.png.config.json").exists()
    d = load_image(out).pixels.astype(int) - load_image(cover).pixels.astype(int)
    assert np.abs(d).max() <= 1 and not d[:, :, 1:].any()
    rec = tmp_path / "rec.bin"
    assert main(["extract", "--in", str(out), "--manifest", str(tmp_path / "stego.png.manifest.json"),
                 "--out", str(rec)]) == EXIT_OK
    assert rec.read_bytes() == b"attack at dawn"


def test_extract_wrong_image_is_runtime_error(tmp_path, cover):
    out = tmp_path / "s.png"
    main(["embed", "--in", str(cover), "--out", str(out), "--random-bits", "50"])
    other = tmp_path / "other.png"
    save_image(Image(np.full((32, 32, 3), 7, dtype=np.uint8)), other)
    assert main(["extract", "--in", str(other), "--manifest", str(out) + ".manifest.json",
                 "--out", str(tmp_path / "x")]) == EXIT_RUNTIME


@pytest.mark.parametrize(
    "extra",
    [
        ["--rate", "1.1", "--random-bits", "10"],
        ["--random-bits", "100000"],
        ["--random-bits", "10", "--payload", "x"],
        [],
        ["--random-bits", "10", "--algo", "f5"],
    ],
)
def test_embed_usage_errors(tmp_path, cover, extra):
    assert main(["embed", "--in", str(cover), "--out", str(tmp_path / "s.png")] + extra) == EXIT_USAGE


def test_lossy_output_rejected_before_writing(tmp_path, cover):
    assert main(["embed", "--in", str(cover), "--out", str(tmp_path / "s.jpg"), "--random-bits", "8"]) == EXIT_USAGE
    assert not list(tmp_path.glob("s.jpg*"))


def test_unknown_subcommand_and_missing_config(tmp_path):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == EXIT_USAGE
    bad = write_json(tmp_path / "bad.json", {"model": {"learning_rate": 1}})
    assert main(["train", "--config", bad]) == EXIT_USAGE
    assert main(["train", "--config", write_json(tmp_path / "a.json", {"model": {"alpha": 2.0}})]) == EXIT_USAGE


# ---------------------------------------------------------------------------
# train / generate


def test_train_resume_and_generate(tmp_path, train_cfg):
    run = tmp_path / "run"
    assert main(["train", "--config", train_cfg, "--out-dir", str(run)]) == EXIT_OK
    snap = json.loads((run / "config.resolved.json").read_text())
    assert snap["command"] == "train" and snap["model"]["mode"] == "gan"
    assert (run / "networks.json").exists() and (run / "trace.jsonl").exists()
    ckpt = run / "checkpoint_epoch001.ckpt"
    assert main(["train", "--config", train_cfg, "--epochs", "2", "--resume", str(ckpt),
                 "--out-dir", str(tmp_path / "more")]) == EXIT_OK
    first = json.loads((tmp_path / "more" / "trace.jsonl").read_text().splitlines()[0])
    assert first["epoch"] == 2 and first["iteration"] == 4

    gen = tmp_path / "gen"
    assert main(["generate", "--checkpoint", str(ckpt), "--n", "3", "--seed", "4", "--out-dir", str(gen)]) == EXIT_OK
    assert sorted(p.name for p in gen.glob("*.png")) == [f"container_{i:05d}.png" for i in range(3)]


def test_alpha_one_sgan_equals_gan_checkpoint(tmp_path, train_cfg):
    assert main(["train", "--config", train_cfg, "--out-dir", str(tmp_path / "g")]) == EXIT_OK
    assert main(["train", "--config", train_cfg, "--mode", "sgan", "--alpha", "1",
                 "--out-dir", str(tmp_path / "s")]) == EXIT_OK
    from sgan.training import load_checkpoint

    g, _ = load_checkpoint(tmp_path / "g" / "checkpoint_epoch001.ckpt")
    s, _ = load_checkpoint(tmp_path / "s" / "checkpoint_epoch001.ckpt")
    for net in ("G", "D"):
        a, b = getattr(g, net).params, getattr(s, net).params
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_corrupt_checkpoint_is_runtime_error(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["generate", "--checkpoint", str(bad), "--n", "2", "--out-dir", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_diverging_training_is_runtime_error(tmp_path):
    cfg = write_json(tmp_path / "t.json", {"model": {"mode": "gan", **TINY_MODEL, "lr_g": 1e300, "lr_d": 1e300},
                                          "corpus_size": 12})
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path / "r")]) == EXIT_RUNTIME


def test_out_dir_from_environment(tmp_path, monkeypatch, train_cfg):
    monkeypatch.setenv("SGAN_OUT_DIR", str(tmp_path / "envout"))
    assert main(["train", "--config", train_cfg]) == EXIT_OK
    assert (tmp_path / "envout" / "train-gan" / "checkpoint_epoch001.ckpt").exists()


# ---------------------------------------------------------------------------
# reruns


def test_rerun_reproduces_train_and_generate(tmp_path, train_cfg):
    assert main(["train", "--config", train_cfg, "--seed", "9", "--out-dir", str(tmp_path / "a")]) == EXIT_OK
    assert main(["rerun", str(tmp_path / "a" / "config.resolved.json"), "--out-dir", str(tmp_path / "b")]) == EXIT_OK
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert set(a) == set(b)
    for name in a:
        if name.endswith(".ckpt"):
            assert a[name] == b[name], name

    ckpt = str(tmp_path / "a" / "checkpoint_epoch001.ckpt")
    main(["generate", "--checkpoint", ckpt, "--n", "4", "--seed", "2", "--out-dir", str(tmp_path / "ga")])
    main(["rerun", str(tmp_path / "ga" / "config.resolved.json"), "--out-dir", str(tmp_path / "gb")])
    pngs = lambda d: {k: v for k, v in tree_bytes(d).items() if k.endswith(".png")}
    assert len(pngs(tmp_path / "ga")) == 4 and pngs(tmp_path / "ga") == pngs(tmp_path / "gb")
    snap = json.loads((tmp_path / "gb" / "config.resolved.json").read_text())
    assert snap["out_dir"] == str(tmp_path / "gb")


def test_rerun_without_override_writes_to_original_place(tmp_path, train_cfg, monkeypatch):
    monkeypatch.chdir(tmp_path)
    run = tmp_path / "orig"
    assert main(["train", "--config", train_cfg, "--out-dir", str(run)]) == EXIT_OK
    first = (run / "checkpoint_epoch001.ckpt").read_bytes()
    (run / "checkpoint_epoch001.ckpt").unlink()
    assert main(["rerun", str(run / "config.resolved.json")]) == EXIT_OK
    assert (run / "checkpoint_epoch001.ckpt").read_bytes() == first
    assert not (tmp_path / "runs").exists()


def test_rerun_rejects_non_snapshot(tmp_path):
    assert main(["rerun", write_json(tmp_path / "x.json", {"hello": 1})]) == EXIT_USAGE


def test_experiment_plan_violation_is_usage_error(tmp_path):
    cfg = write_json(tmp_path / "h.json", {"condition_seeds": {
        "base": 1, "other": 1, "several": [2, 3], "held_out": 4, "test_several": [5, 6]}})
    assert main(["experiment", "--suite", "c1-c6", "--config", cfg, "--out-dir", str(tmp_path / "e")]) == EXIT_USAGE


def test_experiment_missing_generators_is_usage_error(tmp_path):
    assert main(["experiment", "--suite", "real", "--out-dir", str(tmp_path / "e")]) == EXIT_USAGE


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sgan.cli", "embed", "--in", "x.png"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
