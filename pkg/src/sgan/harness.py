"""Steganalysis experiments: real vs generated containers and seed conditions C1-C6."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, bce_loss
from .imaging import Dataset, Image, from_array, synth_corpus, split, to_array
from .nets import Network, build_independent_steganalyser
from .stego import EmbedConfig, capacity, embed, random_payload
from .training import SganConfig, generate, load_checkpoint, load_generator, train

log = logging.getLogger(__name__)

CONDITIONS = ("REAL", "C1", "C2", "C3", "C4", "C5", "C6")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class SteganalyserConfig:
    conv_channels: tuple = (16, 32)
    fc_units: int = 64
    batch_norm: bool = False
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))


# ---------------------------------------------------------------------------
# datasets


def make_stego_pairs(images: list[Image], config: EmbedConfig) -> Dataset:
    """Cover (label 0) followed by its stego copy (label 1), for every image.

    Image ``i`` gets a random full-capacity payload and a position/direction
    key, both derived from ``(config.seed, i)``.
    """
    items, labels = [], []
    for i, im in enumerate(images):
        key = int(np.random.SeedSequence([config.seed, i]).generate_state(1, np.uint64)[0] >> 2)
        cfg = config.with_seed(key)
        payload = random_payload(capacity(im, cfg), key, cfg.rate)
        items += [im, embed(im, payload, cfg)]
        labels += [0, 1]
    return Dataset(items, labels, meta={"embed": asdict(config), "paired": True})


def _pair_arrays(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    if dataset.labels is None:
        raise ValueError("dataset needs labels")
    return to_array(dataset.items), np.asarray(dataset.labels, dtype=np.float64)


# ---------------------------------------------------------------------------
# steganalyser


def new_steganalyser(in_size: int, config: SteganalyserConfig, channels: int = 3) -> Network:
    spec = build_independent_steganalyser(in_size, channels, config.conv_channels, config.fc_units, config.batch_norm)
    return Network.create(spec, config.seed)


def train_steganalyser(
    net: Network, dataset: Dataset, config: SteganalyserConfig, epochs: Optional[int] = None
) -> tuple[Network, list[float]]:
    """Adam on binary cross-entropy.  Returns the network and per-epoch mean losses.

    Batches come from a seeded shuffle that keeps cover/stego pairs adjacent
    when the dataset is marked ``paired``.  Labels are used as given, which is
    what the label-shuffled control relies on.
    """
    x, y = _pair_arrays(dataset)
    if len(np.unique(y)) < 2:
        raise ValueError("steganalyser training needs both cover and stego examples")
    epochs = config.epochs if epochs is None else epochs
    opt = AdamState(config.lr, config.beta1, config.beta2)
    rng = np.random.default_rng([config.seed, 1])
    B = config.batch_size
    losses = []
    paired = dataset.meta.get("paired", False) and len(x) % 2 == 0
    for _ in range(epochs):
        if paired:
            # keep each cover next to its stego copy inside a batch
            pairs = rng.permutation(len(x) // 2)
            order = np.stack([2 * pairs, 2 * pairs + 1], axis=1).reshape(-1)
        else:
            order = rng.permutation(len(x))
        epoch_losses = []
        for start in range(0, len(x) - B + 1, B):
            idx = order[start : start + B]
            net.params.zero_grad()
            loss = bce_loss(net(Tensor(x[idx])), y[idx].reshape(-1, 1))
            backward(loss)
            adam_step(net.params, opt)
            epoch_losses.append(float(loss.data))
        losses.append(float(np.mean(epoch_losses)))
    return net, losses


class Predictor(Protocol):
    def predict_proba(self, x: np.ndarray) -> np.ndarray: ...


@dataclass
class Report:
    plan_id: str
    accuracy: float
    tp: int
    tn: int
    fp: int
    fn: int
    runtime: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_record(self, include_runtime: bool = True) -> dict:
        d = asdict(self)
        if not include_runtime:
            d.pop("runtime")
        return d


def evaluate(model: Predictor, dataset: Dataset, plan_id: str = "eval") -> Report:
    """Threshold the stego probability at 0.5 (strictly above means stego)."""
    t0 = time.perf_counter()
    x, y = _pair_arrays(dataset)
    pred = (np.asarray(model.predict_proba(x)).reshape(-1) > 0.5).astype(int)
    truth = y.astype(int)
    tp = int(np.sum((pred == 1) & (truth == 1)))
    tn = int(np.sum((pred == 0) & (truth == 0)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    acc = (tp + tn) / len(truth) if len(truth) else float("nan")
    return Report(plan_id, acc, tp, tn, fp, fn, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class ExperimentPlan:
    id: str
    generator_checkpoint: str
    train_seeds: tuple
    test_seeds: tuple
    tune_epochs: int = 0
    n_train: int = 1000
    n_test: int = 200
    steganalyser: SteganalyserConfig = SteganalyserConfig()
    embed: EmbedConfig = EmbedConfig()

    def __post_init__(self):
        object.__setattr__(self, "train_seeds", tuple(int(s) for s in self.train_seeds))
        object.__setattr__(self, "test_seeds", tuple(int(s) for s in self.test_seeds))

    def violations(self) -> list[str]:
        tr, te = set(self.train_seeds), set(self.test_seeds)
        out = []
        if self.id not in CONDITIONS[1:]:
            out.append(f"unknown condition {self.id!r}")
            return out
        if not tr or not te:
            out.append("train and test seed sets must be non-empty")
        if self.id == "C1" and tr != te:
            out.append("C1: train seeds must equal test seeds")
        if self.id in ("C2", "C3") and te & tr:
            out.append(f"{self.id}: test seed must not be a train seed")
        if self.id in ("C3", "C6") and self.tune_epochs <= 0:
            out.append(f"{self.id}: needs extra tuning epochs > 0")
        if self.id in ("C1", "C2", "C4", "C5") and self.tune_epochs != 0:
            out.append(f"{self.id}: must not tune the generator")
        if self.id == "C4" and (len(tr) < 2 or len(te) != 1 or te & tr):
            out.append("C4: several train seeds and one held-out test seed")
        if self.id in ("C5", "C6") and (len(tr) < 2 or len(te) < 2 or te & tr):
            out.append(f"{self.id}: multiple disjoint train and test seeds")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["steganalyser"]["conv_channels"] = list(self.steganalyser.conv_channels)
        d["train_seeds"], d["test_seeds"] = list(self.train_seeds), list(self.test_seeds)
        return d


def _per_seed_counts(total: int, seeds: tuple) -> list[int]:
    base, extra = divmod(total, len(seeds))
    return [base + (i < extra) for i in range(len(seeds))]


def containers(G: Network, seeds: tuple, total: int) -> list[Image]:
    """``total`` generated containers split evenly over noise ``seeds``."""
    out: list[Image] = []
    for seed, n in zip(seeds, _per_seed_counts(total, seeds)):
        out += from_array(generate(G, n, seed))
    return out


def container_pairs(G: Network, seeds: tuple, total: int, embed_cfg: EmbedConfig) -> Dataset:
    """Stego pairs for generated containers; each seed's payloads are keyed by that seed,
    so the same seed always reproduces the same labelled set."""
    items, labels = [], []
    for seed, n in zip(seeds, _per_seed_counts(total, seeds)):
        ds = make_stego_pairs(from_array(generate(G, n, seed)), embed_cfg.with_seed(seed))
        items += ds.items
        labels += ds.labels
    return Dataset(items, labels, meta={"seeds": list(seeds), "paired": True})


class Runner:
    """Runs plans against a shared corpus, caching steganalysers trained on identical inputs."""

    def __init__(self, corpus: Optional[np.ndarray] = None, tune_config: Optional[SganConfig] = None):
        self.corpus = corpus
        self.tune_config = tune_config
        self._trained: dict = {}
        self._tuned: dict = {}
        self.seed_log: list[tuple[str, str, int]] = []

    def steganalyser_for(self, plan: ExperimentPlan, G: Network) -> Network:
        key = (plan.generator_checkpoint, plan.train_seeds, plan.n_train, plan.steganalyser, plan.embed)
        if key not in self._trained:
            train_set = container_pairs(G, plan.train_seeds, plan.n_train, plan.embed)
            net = new_steganalyser(G.spec.meta["out_size"], plan.steganalyser, G.spec.output_shape[0])
            self._trained[key] = train_steganalyser(net, train_set, plan.steganalyser)[0]
        for s in plan.train_seeds:
            self.seed_log.append((plan.id, "train", s))
        return self._trained[key]

    def tuned_generator(self, checkpoint: str, epochs: int) -> Network:
        key = (checkpoint, epochs)
        if key not in self._tuned:
            if self.corpus is None:
                raise PlanError("generator tuning needs a training corpus")
            state, cfg = load_checkpoint(checkpoint, self.tune_config)
            train(cfg, self.corpus, state=state, epochs=epochs)
            self._tuned[key] = state.G
        return self._tuned[key]

    def run(self, plan: ExperimentPlan) -> Report:
        problems = plan.violations()
        if problems:
            raise PlanError("; ".join(problems))
        if not Path(plan.generator_checkpoint).exists():
            raise FileNotFoundError(f"generator checkpoint missing: {plan.generator_checkpoint}")
        t0 = time.perf_counter()
        G = load_generator(plan.generator_checkpoint)
        S_star = self.steganalyser_for(plan, G)
        G_test = self.tuned_generator(plan.generator_checkpoint, plan.tune_epochs) if plan.tune_epochs else G
        test_set = container_pairs(G_test, plan.test_seeds, plan.n_test, plan.embed)
        for s in plan.test_seeds:
            self.seed_log.append((plan.id, "test", s))
        rep = evaluate(S_star, test_set, plan.id)
        rep.runtime = time.perf_counter() - t0
        rep.config = plan.to_dict()
        return rep

    def audit(self) -> list[str]:
        """Condition ids whose training consumed one of their own test seeds without C1's licence."""
        bad = []
        by_plan: dict[str, dict[str, set]] = {}
        for pid, role, seed in self.seed_log:
            by_plan.setdefault(pid, {"train": set(), "test": set()})[role].add(seed)
        for pid, sets in by_plan.items():
            if pid != "C1" and sets["train"] & sets["test"]:
                bad.append(pid)
        return bad


def run_condition(plan: ExperimentPlan, corpus: Optional[np.ndarray] = None,
                  tune_config: Optional[SganConfig] = None) -> Report:
    return Runner(corpus, tune_config).run(plan)


def cross_domain_eval(S_star: Network, G: Network, seed: int, n: int, embed_cfg: EmbedConfig,
                      plan_id: str = "generated") -> Report:
    """Accuracy of a steganalyser trained on real covers, on pairs from generated containers."""
    rep = evaluate(S_star, container_pairs(G, (seed,), n, embed_cfg), plan_id)
    rep.config = {"seed": seed, "n": n, "embed": asdict(embed_cfg)}
    return rep


# ---------------------------------------------------------------------------
# suite


def desk_generator_config(mode: str) -> SganConfig:
    """Generator training settings calibrated for the 16x16 synthetic corpus.

    A faster critic (4x the generator rate) and the non-saturating generator
    loss give visibly smoother containers than equal rates at this scale.
    """
    return SganConfig(mode=mode, epochs=15, batch_size=16, g_loss="non_saturating",
                      lr_g=1e-4, lr_d=4e-4, lr_s=4e-4)


@dataclass
class HarnessConfig:
    image_size: int = 16
    corpus_size: int = 2000
    corpus_seed: int = 0
    corpus_noise: float = 0.5
    test_fraction: float = 0.1
    split_seed: int = 0
    embed_seed: int = 11
    steganalyser: SteganalyserConfig = SteganalyserConfig()
    gan: SganConfig = field(default_factory=lambda: desk_generator_config("gan"))
    sgan: SganConfig = field(default_factory=lambda: desk_generator_config("sgan"))
    n_train_containers: int = 600
    n_test_containers: int = 200
    tune_epochs: int = 2
    condition_seeds: dict = field(default_factory=lambda: {
        "base": 1001, "other": 2002, "several": [3003, 3004, 3005, 3006],
        "held_out": 4001, "test_several": [5001, 5002, 5003, 5004],
    })
    cross_domain_seed: int = 6001

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gan"], d["sgan"] = self.gan.to_dict(), self.sgan.to_dict()
        d["steganalyser"]["conv_channels"] = list(self.steganalyser.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HarnessConfig":
        d = dict(d)
        if "steganalyser" in d:
            d["steganalyser"] = SteganalyserConfig(**d["steganalyser"])
        if "gan" in d:
            d["gan"] = SganConfig(**d["gan"])
        if "sgan" in d:
            d["sgan"] = SganConfig(**d["sgan"])
        return cls(**d)

    @property
    def embed(self) -> EmbedConfig:
        return EmbedConfig("pm1", 0, 0.4, self.embed_seed)


def condition_plans(cfg: HarnessConfig, checkpoint: str) -> list[ExperimentPlan]:
    s = cfg.condition_seeds
    common = dict(generator_checkpoint=str(checkpoint), n_train=cfg.n_train_containers,
                  n_test=cfg.n_test_containers, steganalyser=cfg.steganalyser, embed=cfg.embed)
    base, other = (s["base"],), (s["other"],)
    several, test_several = tuple(s["several"]), tuple(s["test_several"])
    return [
        ExperimentPlan("C1", train_seeds=base, test_seeds=base, **common),
        ExperimentPlan("C2", train_seeds=base, test_seeds=other, **common),
        ExperimentPlan("C3", train_seeds=base, test_seeds=other, tune_epochs=cfg.tune_epochs, **common),
        ExperimentPlan("C4", train_seeds=several, test_seeds=(s["held_out"],), **common),
        ExperimentPlan("C5", train_seeds=several, test_seeds=test_several, **common),
        ExperimentPlan("C6", train_seeds=several, test_seeds=test_several, tune_epochs=cfg.tune_epochs, **common),
    ]


def real_corpus(cfg: HarnessConfig) -> tuple[Dataset, Dataset]:
    corpus = synth_corpus(cfg.corpus_size, cfg.image_size, cfg.corpus_seed, noise=cfg.corpus_noise)
    return split(corpus, cfg.test_fraction, cfg.split_seed)


def train_generators(cfg: HarnessConfig, out_dir, corpus: Dataset) -> dict[str, Path]:
    """Train the DCGAN and SGAN container generators on the full corpus."""
    out = Path(out_dir)
    data = to_array(corpus.items)
    paths = {}
    for name, gcfg in (("dcgan", cfg.gan), ("sgan", cfg.sgan)):
        gcfg = replace(gcfg, image_size=cfg.image_size)
        state, trace = train(gcfg, data, out / name)
        paths[name] = out / name / f"checkpoint_epoch{state.epoch:03d}.ckpt"
    return paths


def shuffled_labels(dataset: Dataset, seed: int) -> Dataset:
    """Same images with a permuted label vector; nothing left for a detector to learn."""
    labels = np.random.default_rng([seed, 2]).permutation(np.asarray(dataset.labels)).tolist()
    return Dataset(list(dataset.items), labels, meta={**dataset.meta, "paired": False, "shuffled": True})


def run_real(cfg: HarnessConfig, generators: dict[str, Path], train_set: Dataset, test_set: Dataset,
             control: bool = True) -> list[Report]:
    """S* trained on real covers; tested on real covers and on each generator's containers.

    With ``control`` a second detector is trained on the same pairs with shuffled
    labels and evaluated on the same test pairs.
    """
    t0 = time.perf_counter()
    s_cfg = cfg.steganalyser
    net = new_steganalyser(cfg.image_size, s_cfg)
    train_pairs = make_stego_pairs(train_set.items, cfg.embed)
    test_pairs = make_stego_pairs(test_set.items, cfg.embed.with_seed(cfg.embed_seed + 1))
    train_steganalyser(net, train_pairs, s_cfg)
    reports = [evaluate(net, test_pairs, "REAL/real")]
    if control:
        control_net = train_steganalyser(new_steganalyser(cfg.image_size, s_cfg), shuffled_labels(train_pairs, cfg.embed_seed), s_cfg)[0]
        reports.append(evaluate(control_net, test_pairs, "REAL/shuffled"))
    for name, path in generators.items():
        G = load_generator(path)
        reports.append(cross_domain_eval(net, G, cfg.cross_domain_seed, len(test_set), cfg.embed, f"REAL/{name}"))
    for r in reports:
        r.config = {**r.config, "harness": cfg.to_dict()}
    reports[0].runtime = time.perf_counter() - t0
    return reports


def summary_table(reports: list[Report]) -> str:
    lines = ["| Condition | Accuracy |", "|---|---|"]
    lines += [f"| {r.plan_id} | {r.accuracy:.3f} |" for r in reports]
    return "\n".join(lines)


def write_reports(reports: list[Report], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "reports.jsonl"
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record(include_runtime=False), sort_keys=True) + "\n")
    (out / "summary.md").write_text(summary_table(reports) + "\n")
    with open(out / "runtimes.json", "w") as fh:
        json.dump({r.plan_id: r.runtime for r in reports}, fh, indent=2)
    return path
