"""Command-line entry point: embed/extract, train, generate and experiment suites.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every subcommand writes its resolved configuration as JSON before doing any
work; rerunning with that snapshot (``--config``) reproduces the outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import CheckpointError
from .imaging import ImageFormatError, check_lossless_path, load_directory, load_image, save_image, synth_corpus, from_array, to_array
from .stego import (
    CapacityError,
    EmbedConfig,
    PayloadMismatch,
    bits_to_bytes,
    bytes_to_bits,
    capacity,
    embed,
    extract_with_manifest,
    random_payload,
    read_stego_manifest,
    write_stego_manifest,
)
from .training import SganConfig, TrainingDiverged, generate, init_state, load_checkpoint, load_generator, train

log = logging.getLogger("sgan")

OUT_ENV = "SGAN_OUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def write_snapshot(path: Path, record: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")


# ---------------------------------------------------------------------------
# embed / extract


def cmd_embed(args) -> int:
    if (args.payload is None) == (args.random_bits is None):
        raise UsageError("give exactly one of --payload FILE or --random-bits N")
    try:
        config = EmbedConfig(args.algo, args.channel, args.rate, args.seed)
    except CapacityError as exc:
        raise UsageError(str(exc))
    out = Path(args.out)
    check_lossless_path(out)
    manifest = Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json")
    write_snapshot(out.with_name(out.name + ".config.json"), {
        "command": "embed", "in": str(args.__dict__["in"]), "out": str(out), "manifest": str(manifest),
        "payload": args.payload, "random_bits": args.random_bits, **asdict(config),
    })
    image = load_image(args.__dict__["in"])
    if args.payload is not None:
        payload = bytes_to_bits(Path(args.payload).read_bytes(), config.rate)
    else:
        payload = random_payload(args.random_bits, args.seed, config.rate)
    if len(payload) > capacity(image, config):
        raise CapacityError(f"payload of {len(payload)} bits exceeds capacity {capacity(image, config)}")
    save_image(embed(image, payload, config), out)
    write_stego_manifest(manifest, image, payload, config)
    print(f"embedded {len(payload)} bits into {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    out = Path(args.out)
    write_snapshot(out.with_name(out.name + ".config.json"), {
        "command": "extract", "in": str(args.__dict__["in"]), "manifest": str(args.manifest), "out": str(out),
    })
    config, record = read_stego_manifest(args.manifest)
    payload = extract_with_manifest(load_image(args.__dict__["in"]), record, config)
    data, padded = bits_to_bytes(payload)
    out.write_bytes(data)
    print(f"extracted {len(payload)} bits to {out}" + (" (zero-padded to whole bytes)" if padded else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


@dataclass
class TrainJob:
    """Training run: model config plus where the images come from."""

    model: SganConfig = field(default_factory=SganConfig)
    corpus_size: int = 2000
    corpus_seed: int = 0
    corpus_noise: float = 0.5
    data_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "corpus_size": self.corpus_size, "corpus_seed": self.corpus_seed,
                "corpus_noise": self.corpus_noise, "data_dir": self.data_dir}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainJob":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown train config keys: {sorted(unknown)}")
        d["model"] = _sgan_config(d.get("model", {}))
        return cls(**d)

    def images(self) -> np.ndarray:
        size, ch = self.model.image_size, self.model.channels
        if self.data_dir:
            return to_array(load_directory(self.data_dir, size).items)
        return to_array(synth_corpus(self.corpus_size, size, self.corpus_seed, ch, noise=self.corpus_noise).items)


def _sgan_config(d: dict) -> SganConfig:
    known = {f.name for f in fields(SganConfig)}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown model config keys: {sorted(unknown)}")
    try:
        return SganConfig(**d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def cmd_train(args) -> int:
    record = load_config(args.config, "train") if args.config else {}
    resume = args.resume or record.get("resume")
    job = TrainJob.from_dict({k: v for k, v in record.items() if k not in ("command", "resume", "out_dir")})
    overrides = {k: v for k, v in (("mode", args.mode), ("alpha", args.alpha), ("epochs", args.epochs)) if v is not None}
    if args.seed is not None:
        overrides.update(param_seed=args.seed, noise_seed=args.seed + 1, data_seed=args.seed + 2, embed_seed=args.seed + 3)
    try:
        job.model = replace(job.model, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc))
    out = Path(args.out_dir or record.get("out_dir") or default_out_dir() / f"train-{job.model.mode}")
    write_snapshot(out / "config.resolved.json", {"command": "train", "out_dir": str(out), "resume": resume,
                                                  **job.to_dict()})
    state = None
    if resume:
        state, _ = load_checkpoint(resume, job.model)
    data = job.images()
    state = state or init_state(job.model)
    specs = {tag: json.loads(net.spec.to_json()) for tag, net in (("G", state.G), ("D", state.D), ("S", state.S)) if net}
    write_snapshot(out / "networks.json", specs)
    state, trace = train(job.model, data, out, state=state)
    d_losses = [r["loss"] for r in trace if r["step"] == "D"]
    print(f"trained to epoch {state.epoch}; final mean L_D {np.mean(d_losses[-10:]) if d_losses else float('nan'):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be positive")
    out = Path(args.out_dir) if args.out_dir else default_out_dir() / "generated"
    write_snapshot(out / "config.resolved.json", {
        "command": "generate", "checkpoint": str(args.checkpoint), "n": args.n, "seed": args.seed, "out_dir": str(out),
    })
    G = load_generator(args.checkpoint)
    images = from_array(generate(G, args.n, args.seed))
    for i, im in enumerate(images):
        save_image(im, out / f"container_{i:05d}.png")
    print(f"wrote {len(images)} containers to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment


SUITES = ("real", "c1-c6", "all")


def cmd_experiment(args) -> int:
    from . import harness

    record = load_config(args.config, "experiment") if args.config else {}
    try:
        cfg = harness.HarnessConfig.from_dict(record.get("harness", record) if "command" in record else record)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad harness config: {exc}")
    snap_gens = record.get("generators", {}) if "command" in record else {}
    train_first = args.train_first or bool(record.get("train_first", False))
    suite = args.suite or record.get("suite", "all")
    snap_out = record.get("out_dir") if "command" in record else None
    out = Path(args.out_dir or snap_out or default_out_dir() / "experiment")
    gen_dir = out / "generators"
    generators = {
        "dcgan": Path(args.dcgan or snap_gens.get("dcgan") or gen_dir / "dcgan" / f"checkpoint_epoch{cfg.gan.epochs:03d}.ckpt"),
        "sgan": Path(args.sgan or snap_gens.get("sgan") or gen_dir / "sgan" / f"checkpoint_epoch{cfg.sgan.epochs:03d}.ckpt"),
    }
    needed = ["dcgan", "sgan"] if suite in ("real", "all") else ["dcgan"]
    plans = harness.condition_plans(cfg, generators["dcgan"]) if suite != "real" else []
    problems = [f"{p.id}: {v}" for p in plans for v in p.violations()]
    if problems:
        raise UsageError("invalid experiment plans:\n  " + "\n  ".join(problems))
    write_snapshot(out / "config.resolved.json", {
        "command": "experiment", "out_dir": str(out), "suite": suite, "train_first": train_first,
        "generators": {k: str(v) for k, v in generators.items()}, "harness": cfg.to_dict(),
    })
    train_set, test_set = harness.real_corpus(cfg)
    if train_first:
        generators.update(harness.train_generators(cfg, gen_dir, train_set))
    missing = [str(generators[k]) for k in needed if not generators[k].exists()]
    if missing:
        raise UsageError("missing generator checkpoints (use --train-first): " + ", ".join(missing))

    reports = []
    if suite in ("real", "all"):
        reports += harness.run_real(cfg, generators, train_set, test_set)
    if suite in ("c1-c6", "all"):
        runner = harness.Runner(to_array(train_set.items), replace(cfg.gan, image_size=cfg.image_size))
        for plan in plans:
            log.info("running %s", plan.id)
            reports.append(runner.run(plan))
        leaked = runner.audit()
        if leaked:
            raise UsageError(f"test seeds leaked into training for {leaked}")
    harness.write_reports(reports, out)
    print(harness.summary_table(reports))
    return EXIT_OK


# ---------------------------------------------------------------------------
# rerun


def snapshot_argv(snapshot, out_dir: Optional[str] = None) -> list[str]:
    """Command line that replays ``snapshot``, optionally redirecting outputs into ``out_dir``."""
    r = read_json(snapshot)
    cmd = r.get("command")
    moved = (lambda p: str(Path(out_dir) / Path(p).name)) if out_dir else (lambda p: p)
    if cmd in ("train", "experiment"):
        return [cmd, "--config", str(snapshot)] + (["--out-dir", out_dir] if out_dir else [])
    if cmd == "embed":
        argv = ["embed", "--in", r["in"], "--out", moved(r["out"]), "--manifest", moved(r["manifest"]),
                "--algo", r["algorithm"], "--rate", repr(r["rate"]), "--channel", str(r["channel"]), "--seed", str(r["seed"])]
        return argv + (["--payload", r["payload"]] if r["payload"] is not None else ["--random-bits", str(r["random_bits"])])
    if cmd == "extract":
        return ["extract", "--in", r["in"], "--manifest", r["manifest"], "--out", moved(r["out"])]
    if cmd == "generate":
        out = out_dir or r.get("out_dir") or str(Path(snapshot).parent)
        return ["generate", "--checkpoint", r["checkpoint"], "--n", str(r["n"]), "--seed", str(r["seed"]), "--out-dir", out]
    raise UsageError(f"{snapshot}: not a resolved config snapshot")


def cmd_rerun(args) -> int:
    return main(snapshot_argv(args.snapshot, args.out_dir))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sgan", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("embed", help="hide a payload in a lossless image")
    e.add_argument("--in", required=True, metavar="IMAGE")
    e.add_argument("--out", required=True, metavar="IMAGE")
    e.add_argument("--payload", metavar="FILE")
    e.add_argument("--random-bits", type=int, metavar="N")
    e.add_argument("--algo", choices=("lsb", "pm1"), default="pm1")
    e.add_argument("--rate", type=float, default=0.4)
    e.add_argument("--channel", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--manifest", help="manifest path (default: OUT.manifest.json)")
    e.set_defaults(func=cmd_embed)

    x = sub.add_parser("extract", help="recover a payload using its manifest")
    x.add_argument("--in", required=True, metavar="IMAGE")
    x.add_argument("--manifest", required=True)
    x.add_argument("--out", required=True, metavar="FILE")
    x.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="train a GAN or SGAN container generator")
    t.add_argument("--mode", choices=("gan", "sgan"))
    t.add_argument("--config", help="JSON train config (a config.resolved.json works too)")
    t.add_argument("--alpha", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, help="base seed for all training streams")
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample containers from a trained generator")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("experiment", help="run steganalysis experiment suites")
    r.add_argument("--suite", choices=SUITES, help="default: all (or the snapshot's suite)")
    r.add_argument("--config", help="JSON harness config")
    r.add_argument("--train-first", action="store_true", help="train the generators before evaluating")
    r.add_argument("--dcgan", metavar="CHECKPOINT")
    r.add_argument("--sgan", metavar="CHECKPOINT")
    r.add_argument("--out-dir")
    r.set_defaults(func=cmd_experiment)

    q = sub.add_parser("rerun", help="replay a resolved config snapshot")
    q.add_argument("snapshot")
    q.add_argument("--out-dir", help="write outputs here instead of the original locations")
    q.set_defaults(func=cmd_rerun)
    return p


def load_config(path, command: str) -> dict:
    """Config body from a plain config file or a resolved snapshot of ``command``."""
    record = read_json(path)
    if "command" not in record:
        return record
    if record["command"] != command:
        raise UsageError(f"{path} is a snapshot of '{record['command']}', not '{command}'")
    return record


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by argparse
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, CapacityError, ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PayloadMismatch, CheckpointError, TrainingDiverged, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
