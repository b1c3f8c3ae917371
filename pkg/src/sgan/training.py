"""GAN and three-player SGAN training loops."""

from __future__ import annotations

import contextlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from .autodiff import (
    AdamState,
    NonFiniteGradient,
    Tensor,
    adam_step,
    backward,
    bce_loss,
    concat,
    load_arrays,
    save_arrays,
    slice_rows,
    straight_through,
)
from .imaging import to_uint8
from .nets import Network, build_critic, build_generator
from .stego import embed_pm1_batch

log = logging.getLogger(__name__)

G_LOSSES = ("saturating", "non_saturating")
STEGO_GRADIENTS = ("straight_through", "detach")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class SganConfig:
    mode: str = "sgan"
    alpha: float = 0.85
    epochs: int = 5
    batch_size: int = 32
    image_size: int = 16
    channels: int = 3
    z_dim: int = 100
    base_channels: int = 16
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_s: float = 2e-4
    betas_g: tuple = (0.5, 0.999)
    betas_d: tuple = (0.5, 0.999)
    betas_s: tuple = (0.5, 0.999)
    g_loss: str = "saturating"
    stego_gradient: str = "straight_through"
    embed_channel: int = 0
    embed_rate: float = 0.4
    param_seed: int = 0
    noise_seed: int = 1
    data_seed: int = 2
    embed_seed: int = 3
    checkpoint_every: int = 1

    def __post_init__(self):
        self.betas_g, self.betas_d, self.betas_s = (tuple(b) for b in (self.betas_g, self.betas_d, self.betas_s))
        if self.mode not in ("gan", "sgan"):
            raise ValueError(f"mode must be 'gan' or 'sgan', got {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if min(self.lr_g, self.lr_d, self.lr_s) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.g_loss not in G_LOSSES:
            raise ValueError(f"g_loss must be one of {G_LOSSES}")
        if self.stego_gradient not in STEGO_GRADIENTS:
            raise ValueError(f"stego_gradient must be one of {STEGO_GRADIENTS}")
        if self.mode == "sgan" and self.alpha <= 0.7:
            warnings.warn(f"alpha={self.alpha} <= 0.7 tends to give noise-like generator output", stacklevel=2)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("betas_g", "betas_d", "betas_s"):
            d[k] = list(d[k])
        return d


# ---------------------------------------------------------------------------
# helpers


@contextlib.contextmanager
def frozen(*nets: Optional[Network]) -> Iterator[None]:
    """Treat the parameters of ``nets`` as constants inside the block."""
    saved = []
    for net in nets:
        if net is None:
            continue
        for _, t in net.params.trainable():
            saved.append(t)
            t.requires_grad = False
    try:
        yield
    finally:
        for t in saved:
            t.requires_grad = True


def quantize(fake: np.ndarray) -> np.ndarray:
    """Snap a [-1, 1] NCHW array onto the 8-bit grid (still normalised)."""
    return to_uint8(fake).astype(np.float64) / 127.5 - 1.0


def make_stego(fake: np.ndarray, rng: np.random.Generator, channel: int = 0, rate: float = 0.4) -> np.ndarray:
    """Quantise to 8 bits, +-1 embed random bits, map back to [-1, 1]."""
    embedded = embed_pm1_batch(to_uint8(fake), channel, rate, rng)
    return embedded.astype(np.float64) / 127.5 - 1.0


def stego_surrogate(cover: Tensor, stego_value: np.ndarray, mode: str = "straight_through") -> Tensor:
    """Stego(cover) in the forward pass; identity (or nothing, with ``detach``) backward."""
    if mode == "straight_through":
        return straight_through(cover, stego_value)
    if mode == "detach":
        return Tensor(stego_value)
    raise ValueError(f"unknown stego gradient mode {mode!r}")


StegoFn = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# losses


def _joint(net: Network, first, second, update_stats: bool) -> tuple[Tensor, Tensor]:
    """Run ``net`` on one concatenated batch and split the outputs.

    Critics see both classes in a single batch so that batch normalisation
    shares statistics across them; with separate batches, per-batch
    standardisation erases exactly the difference the critic must detect.
    """
    n = len(first.data if isinstance(first, Tensor) else first)
    p = net(concat([first, second]), update_stats=update_stats)
    return slice_rows(p, 0, n), slice_rows(p, n, p.shape[0])


def discriminator_loss(D: Network, real: np.ndarray, fake: np.ndarray, update_stats: bool = True) -> Tensor:
    """-[mean log D(x) + mean log(1 - D(G(z)))], i.e. ascent on L written as descent."""
    p_real, p_fake = _joint(D, real, fake, update_stats)
    return bce_loss(p_real, 1.0) + bce_loss(p_fake, 0.0)


def steganalyser_loss(S: Network, cover: np.ndarray, stego: np.ndarray, update_stats: bool = True) -> Tensor:
    """-[mean log S(Stego(G(z))) + mean log(1 - S(G(z)))]."""
    p_stego, p_cover = _joint(S, stego, cover, update_stats)
    return bce_loss(p_stego, 1.0) + bce_loss(p_cover, 0.0)


def generator_d_term(D: Network, real: np.ndarray, fake: Tensor, g_loss: str = "saturating") -> Tensor:
    _, p = _joint(D, real, fake, update_stats=False)
    if g_loss == "saturating":
        return -bce_loss(p, 0.0)  # mean log(1 - D(G(z)))
    return bce_loss(p, 1.0)  # -mean log D(G(z))


def generator_s_term(S: Network, cover: Tensor, stego: Tensor, g_loss: str = "saturating") -> Tensor:
    p_stego, p_cover = _joint(S, stego, cover, update_stats=False)
    if g_loss == "saturating":
        # mean log S(Stego(G(z))) + mean log(1 - S(G(z)))
        return -bce_loss(p_stego, 1.0) - bce_loss(p_cover, 0.0)
    return bce_loss(p_stego, 0.0) + bce_loss(p_cover, 1.0)


def generator_loss(
    G: Network,
    D: Network,
    z: np.ndarray,
    real: np.ndarray,
    S: Optional[Network] = None,
    alpha: float = 1.0,
    stego_fn: Optional[StegoFn] = None,
    g_loss: str = "saturating",
    stego_gradient: str = "straight_through",
    update_stats: bool = True,
) -> Tensor:
    """Loss descended by G; D and S are held fixed.

    Without ``S`` this is the plain GAN term.  With ``S`` it is
    alpha * D-term + (1 - alpha) * S-term, where S sees the 8-bit quantised
    generator output as cover and its +-1 embedded copy as stego; both pass
    gradients straight through the non-differentiable quantise/embed step.
    ``real`` is the current real batch, which D sees next to the fakes.
    """
    fake = G(Tensor(z), update_stats=update_stats)
    with frozen(D, S):
        d_term = generator_d_term(D, real, fake, g_loss)
        if S is None:
            return d_term
        cover = straight_through(fake, quantize(fake.data))
        stego = stego_surrogate(fake, stego_fn(fake.data), stego_gradient)
        s_term = generator_s_term(S, cover, stego, g_loss)
        return alpha * d_term + (1.0 - alpha) * s_term


def gan_losses(D: Network, G: Network, real: np.ndarray, z: np.ndarray, g_loss: str = "saturating") -> tuple[Tensor, Tensor]:
    """(L_D, L_G) for one batch; L_D only reaches theta_D and L_G only theta_G."""
    with frozen(G):
        fake = G(Tensor(z), update_stats=False).data
    l_d = discriminator_loss(D, real, fake, update_stats=False)
    l_g = generator_loss(G, D, z, real, g_loss=g_loss, update_stats=False)
    return l_d, l_g


def sgan_losses(
    D: Network,
    S: Network,
    G: Network,
    stego_fn: StegoFn,
    real: np.ndarray,
    z: np.ndarray,
    alpha: float,
    g_loss: str = "saturating",
    stego_gradient: str = "straight_through",
) -> tuple[Tensor, Tensor, Tensor]:
    """(L_D, L_S, L_G) for one batch.  ``stego_fn`` must be deterministic for
    repeatable values (e.g. a closure over a fixed seed)."""
    with frozen(G):
        fake = G(Tensor(z), update_stats=False).data
    l_d = discriminator_loss(D, real, fake, update_stats=False)
    l_s = steganalyser_loss(S, quantize(fake), stego_fn(fake), update_stats=False)
    l_g = generator_loss(G, D, z, real, S, alpha, stego_fn, g_loss, stego_gradient, update_stats=False)
    return l_d, l_s, l_g


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    G: Network
    D: Network
    S: Optional[Network]
    opt_g: AdamState
    opt_d: AdamState
    opt_s: Optional[AdamState]
    noise_rng: np.random.Generator
    data_rng: np.random.Generator
    embed_rng: np.random.Generator
    epoch: int = 0
    iteration: int = 0
    step_counts: dict = field(default_factory=lambda: {"D": 0, "S": 0, "G": 0})


def init_state(config: SganConfig) -> TrainState:
    """Fresh networks and optimizers.  S is built in both modes from its own
    seed stream so that G and D initialise identically for gan and sgan."""
    param_rng = np.random.default_rng(config.param_seed)
    g_rng, d_rng, s_rng = param_rng.spawn(3)
    G = Network.create(build_generator(config.z_dim, config.base_channels, config.image_size, config.channels), g_rng)
    D = Network.create(build_critic("discriminator", config.image_size, config.base_channels, config.channels), d_rng)
    S = opt_s = None
    if config.mode == "sgan":
        S = Network.create(build_critic("steganalyser", config.image_size, config.base_channels, config.channels), s_rng)
        opt_s = AdamState(config.lr_s, *config.betas_s)
    return TrainState(
        G, D, S,
        AdamState(config.lr_g, *config.betas_g),
        AdamState(config.lr_d, *config.betas_d),
        opt_s,
        np.random.default_rng(config.noise_seed),
        np.random.default_rng(config.data_seed),
        np.random.default_rng(config.embed_seed),
    )


def _record(trace: list, state: TrainState, step: str, loss: Tensor, net: Network, t0: float) -> None:
    value = float(loss.data)
    rec = {
        "iteration": state.iteration,
        "epoch": state.epoch + 1,
        "step": step,
        "loss": value,
        "grad_norm": net.params.grad_norm(),
        "time": time.perf_counter() - t0,
    }
    trace.append(rec)
    state.step_counts[step] += 1
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite {step} loss at iteration {state.iteration}", trace)


def _update(trace: list, state: TrainState, step: str, loss: Tensor, net: Network, opt: AdamState, t0: float) -> None:
    """Backprop ``loss``, log it, then take one Adam step on ``net`` only."""
    backward(loss)
    _record(trace, state, step, loss, net, t0)
    try:
        adam_step(net.params, opt)
    except NonFiniteGradient as exc:
        raise TrainingDiverged(f"{exc} at iteration {state.iteration}", trace) from exc


def train_epoch(state: TrainState, config: SganConfig, data: np.ndarray) -> list[dict]:
    """One pass over ``data`` (N, C, H, W in [-1, 1]).

    Per mini-batch: one D update, one S update (sgan mode), then two G
    updates with fresh noise.  Incomplete trailing batches are dropped.
    """
    n = len(data)
    if n < config.batch_size:
        raise ValueError(f"dataset of {n} images is smaller than one batch ({config.batch_size})")
    trace: list[dict] = []
    t0 = time.perf_counter()
    order = state.data_rng.permutation(n)
    B = config.batch_size
    sgan = config.mode == "sgan"

    def stego_fn(arr):
        return make_stego(arr, state.embed_rng, config.embed_channel, config.embed_rate)

    for start in range(0, n - B + 1, B):
        state.iteration += 1
        real = data[order[start : start + B]]

        z = state.noise_rng.normal(size=(B, config.z_dim))
        with frozen(state.G):
            fake = state.G(Tensor(z), update_stats=False).data

        state.D.params.zero_grad()
        _update(trace, state, "D", discriminator_loss(state.D, real, fake), state.D, state.opt_d, t0)

        if sgan:
            state.S.params.zero_grad()
            l_s = steganalyser_loss(state.S, quantize(fake), stego_fn(fake))
            _update(trace, state, "S", l_s, state.S, state.opt_s, t0)

        for _ in range(2):
            z = state.noise_rng.normal(size=(B, config.z_dim))
            state.G.params.zero_grad()
            l_g = generator_loss(
                state.G, state.D, z, real,
                S=state.S if sgan else None,
                alpha=config.alpha,
                stego_fn=stego_fn,
                g_loss=config.g_loss,
                stego_gradient=config.stego_gradient,
            )
            _update(trace, state, "G", l_g, state.G, state.opt_g, t0)
    state.epoch += 1
    return trace


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(state: TrainState, config: SganConfig, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    opt_meta = {}
    for tag, net, opt in (("G", state.G, state.opt_g), ("D", state.D, state.opt_d), ("S", state.S, state.opt_s)):
        if net is None:
            continue
        arrays.update(net.state_arrays(f"{tag}/"))
        for k, m in opt.m.items():
            arrays[f"adam_{tag}/m/{k}"] = m
            arrays[f"adam_{tag}/v/{k}"] = opt.v[k]
        opt_meta[tag] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step}
    meta = {
        "kind": "sgan-train-state",
        "config": config.to_dict(),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "step_counts": state.step_counts,
        "optimizers": opt_meta,
        "rng": {k: _rng_state(getattr(state, k)) for k in ("noise_rng", "data_rng", "embed_rng")},
        "specs": {tag: json.loads(net.spec.to_json()) for tag, net in (("G", state.G), ("D", state.D), ("S", state.S)) if net},
    }
    save_arrays(path, arrays, meta)


def load_checkpoint(path, config: Optional[SganConfig] = None) -> tuple[TrainState, SganConfig]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "sgan-train-state":
        raise ValueError(f"{path}: not a training checkpoint")
    config = config or SganConfig(**meta["config"])
    state = init_state(config)
    for tag, net, opt in (("G", state.G, state.opt_g), ("D", state.D, state.opt_d), ("S", state.S, state.opt_s)):
        if net is None:
            continue
        net.load_state_arrays(arrays, f"{tag}/")
        om = meta["optimizers"].get(tag)
        if om is None:
            continue
        opt.step = om["step"]
        for k in net.params:
            if f"adam_{tag}/m/{k}" in arrays:
                opt.m[k] = arrays[f"adam_{tag}/m/{k}"].copy()
                opt.v[k] = arrays[f"adam_{tag}/v/{k}"].copy()
    for k, st in meta["rng"].items():
        setattr(state, k, _restore_rng(st))
    state.epoch = meta["epoch"]
    state.iteration = meta["iteration"]
    state.step_counts = dict(meta["step_counts"])
    return state, config


def load_generator(path) -> Network:
    """The generator from a training checkpoint (or a standalone network file)."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") == "sgan-train-state":
        from .nets import NetworkSpec

        spec = NetworkSpec.from_json(json.dumps(meta["specs"]["G"]))
        net = Network.create(spec, 0)
        net.load_state_arrays(arrays, "G/")
        return net
    return Network.load(path)


def train(
    config: SganConfig,
    data: np.ndarray,
    out_dir=None,
    state: Optional[TrainState] = None,
    epochs: Optional[int] = None,
) -> tuple[TrainState, list[dict]]:
    """Run ``epochs`` (default: up to ``config.epochs``) epochs, checkpointing into ``out_dir``."""
    state = state or init_state(config)
    target = state.epoch + epochs if epochs is not None else config.epochs
    trace: list[dict] = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        if state.epoch == 0:
            # a fresh run replaces any trace left by an earlier run in the same place
            (out / "trace.jsonl").unlink(missing_ok=True)
    while state.epoch < target:
        try:
            recs = train_epoch(state, config, data)
        except TrainingDiverged as exc:
            trace.extend(exc.trace)
            if out:
                write_trace(trace, out / "trace.jsonl", append=True)
            raise TrainingDiverged(str(exc), trace) from exc
        trace.extend(recs)
        if out:
            write_trace(recs, out / "trace.jsonl", append=True)
            if state.epoch % config.checkpoint_every == 0 or state.epoch == target:
                save_checkpoint(state, config, out / f"checkpoint_epoch{state.epoch:03d}.ckpt")
        d_losses = [r["loss"] for r in recs if r["step"] == "D"]
        log.info("epoch %d: mean L_D %.4f", state.epoch, float(np.mean(d_losses)))
    return state, trace


def write_trace(records: list[dict], path, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def generate(G: Network, n: int, seed: int, batch_size: int = 256) -> np.ndarray:
    """``n`` containers from noise seeded by ``seed`` (eval-mode batch norm), NCHW in [-1, 1]."""
    z = np.random.default_rng(seed).normal(size=(n, G.spec.input_shape[0]))
    with frozen(G):
        parts = [G(Tensor(z[i : i + batch_size]), training=False).data for i in range(0, n, batch_size)]
    return np.concatenate(parts)
