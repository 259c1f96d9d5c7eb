"""Adversarial training loop, checkpoint archives and inference."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import data as dp
from .errors import ChecksumError, ConfigError, NumericError, ShapeError
from .losses import DEFAULT_LAMBDA, EPS, discriminator_loss, generator_loss
from .models import (TASK_BONE, TASK_SEG, Discriminator, Generator, SchemeConfig,
                     build_discriminator, build_generator, describe, discriminator_forward,
                     from_batch, generator_forward, to_batch)

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "loss_gan", "loss_l1", "loss_disc")
FORMAT_VERSION = 1
# fixed zip timestamp so identical checkpoints are byte-identical
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class TrainConfig:
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    lam: float = DEFAULT_LAMBDA
    lr: float = 0.0002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    max_epochs: int = 300
    stop_l1: float = 0.005
    seed: int = 0
    checkpoint_dir: Path | None = None
    eps: float = EPS

    def __post_init__(self):
        if isinstance(self.scheme, str):
            self.scheme = SchemeConfig(self.scheme)
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.stop_l1 <= 0:
            raise ConfigError("stop_l1 must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.checkpoint_dir is not None:
            self.checkpoint_dir = Path(self.checkpoint_dir)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(), "lambda": self.lam, "lr": self.lr,
            "adam_beta1": self.adam_beta1, "adam_beta2": self.adam_beta2,
            "batch_size": self.batch_size, "max_epochs": self.max_epochs,
            "stop_l1": self.stop_l1, "seed": self.seed, "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict, checkpoint_dir=None) -> "TrainConfig":
        return cls(scheme=SchemeConfig(**d["scheme"]), lam=d["lambda"], lr=d["lr"],
                   adam_beta1=d["adam_beta1"], adam_beta2=d["adam_beta2"],
                   batch_size=d["batch_size"], max_epochs=d["max_epochs"],
                   stop_l1=d["stop_l1"], seed=d["seed"], eps=d.get("eps", EPS),
                   checkpoint_dir=checkpoint_dir)


@dataclass
class LogRow:
    step: int
    epoch: int
    loss_gan: float
    loss_l1: float
    loss_disc: float


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    epoch: int = 0  # epochs completed
    step: int = 0
    log: list[LogRow] = field(default_factory=list)
    split_fingerprint: str = ""


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def init_state(cfg: TrainConfig, split_fingerprint: str = "") -> TrainState:
    g = build_generator(cfg.scheme, cfg.seed)
    d = build_discriminator(cfg.scheme, cfg.seed)
    return TrainState(cfg, g, d, _adam(g.parameters(), cfg), _adam(d.parameters(), cfg),
                      split_fingerprint=split_fingerprint)


def task_target(sample: dp.PairedSample, tasks: Sequence[str]) -> np.ndarray:
    parts = {TASK_SEG: sample.Y1, TASK_BONE: sample.Y2}
    return np.concatenate([parts[t] for t in tasks], axis=-1)


def make_batch(samples: Sequence[dp.PairedSample], tasks: Sequence[str]):
    X = to_batch([s.X for s in samples])
    Y = to_batch([task_target(s, tasks) for s in samples])
    return X, Y


def _step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) % (2 ** 63)


def _dump_and_raise(state: TrainState, what: str, cause: Exception | None = None):
    where = ""
    if state.config.checkpoint_dir is not None:
        path = state.config.checkpoint_dir / "diverged.ckpt"
        try:
            save_checkpoint(state, path)
            where = f"; state dumped to {path}"
        except Exception:  # the original failure matters more than the dump
            log.exception("could not dump diverged state")
    raise NumericError(f"non-finite {what} at step {state.step} (epoch {state.epoch}){where}") from cause


def train_step(state: TrainState, batch: Sequence[dp.PairedSample]) -> TrainState:
    """One discriminator update followed by one generator update on ``batch``."""
    cfg = state.config
    X, Y = make_batch(batch, cfg.scheme.tasks)
    G, D = state.generator, state.discriminator
    torch.manual_seed(_step_seed(cfg.seed, state.step))  # dropout draws

    # 1) generate
    Yhat = generator_forward(G, X, training=True)

    # 2) + 3) score real and fake pairs, update D with the fake held constant
    fake = Yhat.detach()
    DR = discriminator_forward(D, X, Y)
    DF = discriminator_forward(D, X, fake)
    try:
        loss_d = discriminator_loss(DR, DF, cfg.eps).total
    except NumericError as exc:
        _dump_and_raise(state, "discriminator output", exc)
    if not torch.isfinite(loss_d):
        _dump_and_raise(state, "discriminator loss")
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()

    # 4) update G against the freshly updated D
    for p in D.parameters():
        p.requires_grad_(False)
    try:
        DF_g = discriminator_forward(D, X, Yhat)
        lg = generator_loss(DF_g, Y, Yhat, cfg.lam, cfg.eps)
    except NumericError as exc:
        _dump_and_raise(state, "generator output", exc)
    finally:
        for p in D.parameters():
            p.requires_grad_(True)
    if not torch.isfinite(lg.total):
        _dump_and_raise(state, "generator loss")
    state.opt_g.zero_grad(set_to_none=True)
    lg.total.backward()
    state.opt_g.step()

    state.step += 1
    state.log.append(LogRow(state.step, state.epoch + 1, lg.gan_term.item(),
                            lg.l1_term.item(), loss_d.item()))
    return state


@torch.no_grad()
def l1_on(gen: Generator, samples: Sequence[dp.PairedSample]) -> float:
    """Mean absolute error of the generator (dropout off) over ``samples``."""
    tasks = gen.cfg.tasks
    total = 0.0
    for s in samples:
        X, Y = make_batch([s], tasks)
        total += float((generator_forward(gen, X) - Y).abs().mean())
    return total / max(1, len(samples))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class TrainResult:
    checkpoint: "Checkpoint"
    epochs: int
    steps: int
    stopped_early: bool
    epoch_l1: list[float]
    best_val_l1: float | None
    best_path: Path | None


def train(cfg: TrainConfig, train_samples: Sequence[dp.PairedSample],
          val_samples: Sequence[dp.PairedSample] | None = None,
          split_fingerprint: str = "", state: TrainState | None = None) -> TrainResult:
    """Train until the epoch-mean L1 term drops to ``stop_l1`` or ``max_epochs``."""
    train_samples = list(train_samples)
    if not train_samples:
        raise ConfigError("training set is empty")
    state = state or init_state(cfg, split_fingerprint)
    ckdir = cfg.checkpoint_dir
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    n = len(train_samples)
    epoch_l1: list[float] = []
    best_val, best_path = math.inf, None
    stopped = False
    while state.epoch < cfg.max_epochs:
        order = epoch_order(cfg.seed, state.epoch, n)
        start = len(state.log)
        for i in range(0, n, cfg.batch_size):
            train_step(state, [train_samples[j] for j in order[i:i + cfg.batch_size]])
        state.epoch += 1
        mean_l1 = float(np.mean([r.loss_l1 for r in state.log[start:]]))
        epoch_l1.append(mean_l1)
        log.info("%s epoch %d: l1 %.5f", cfg.scheme.scheme, state.epoch, mean_l1)

        if val_samples:
            v = l1_on(state.generator, val_samples)
            if v < best_val:
                best_val = v
                if ckdir is not None:
                    best_path = ckdir / "best.ckpt"
                    save_checkpoint(state, best_path)
        if mean_l1 <= cfg.stop_l1:
            stopped = True
            break

    if ckdir is not None:
        save_checkpoint(state, ckdir / "final.ckpt")
        write_loss_log(state.log, ckdir / "loss_log.csv")
    return TrainResult(Checkpoint.from_state(state), state.epoch, state.step, stopped,
                       epoch_l1, None if math.isinf(best_val) else best_val, best_path)


def write_loss_log(rows: Sequence[LogRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r.step, r.epoch, repr(r.loss_gan), repr(r.loss_l1), repr(r.loss_disc)])


def read_loss_log(path) -> list[LogRow]:
    with open(path, newline="") as fh:
        return [LogRow(int(r["step"]), int(r["epoch"]), float(r["loss_gan"]),
                       float(r["loss_l1"]), float(r["loss_disc"])) for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------- checkpoints

def _tensors_of(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()}


def _optimizer_tensors(opt: torch.optim.Optimizer, module: torch.nn.Module) -> tuple[dict, dict]:
    names = {id(p): n for n, p in module.named_parameters()}
    blobs, steps = {}, {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            blobs[f"{name}.exp_avg"] = st["exp_avg"].detach().numpy().astype("<f4")
            blobs[f"{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().astype("<f4")
            steps[name] = float(st["step"])
    return blobs, steps


@dataclass
class Checkpoint:
    descriptor: dict
    config: dict
    generator: dict[str, np.ndarray]
    discriminator: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    optimizer_steps: dict[str, dict[str, float]]
    epoch: int
    step: int
    split_fingerprint: str = ""
    _gen_cache: Generator | None = field(default=None, repr=False, compare=False)

    @property
    def scheme(self) -> SchemeConfig:
        return SchemeConfig(**self.descriptor["config"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    @classmethod
    def from_state(cls, state: TrainState) -> "Checkpoint":
        g_opt, g_steps = _optimizer_tensors(state.opt_g, state.generator)
        d_opt, d_steps = _optimizer_tensors(state.opt_d, state.discriminator)
        opt = {f"g/{k}": v for k, v in g_opt.items()}
        opt.update({f"d/{k}": v for k, v in d_opt.items()})
        return cls(describe(state.config.scheme), state.config.to_dict(),
                   _tensors_of(state.generator), _tensors_of(state.discriminator),
                   opt, {"g": g_steps, "d": d_steps}, state.epoch, state.step,
                   state.split_fingerprint)

    def build_generator(self) -> Generator:
        g = Generator(self.scheme)
        g.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in self.generator.items()})
        return g

    def build_discriminator(self) -> Discriminator:
        d = Discriminator(self.scheme)
        d.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in self.discriminator.items()})
        return d

    def get_generator(self) -> Generator:
        if self._gen_cache is None:
            self._gen_cache = self.build_generator()
        return self._gen_cache

    def to_state(self, checkpoint_dir=None) -> TrainState:
        """Rebuild a resumable training state (weights and Adam moments)."""
        cfg = TrainConfig.from_dict(self.config, checkpoint_dir)
        g, d = self.build_generator(), self.build_discriminator()
        state = TrainState(cfg, g, d, _adam(g.parameters(), cfg), _adam(d.parameters(), cfg),
                           epoch=self.epoch, step=self.step, split_fingerprint=self.split_fingerprint)
        for prefix, module, opt in (("g", g, state.opt_g), ("d", d, state.opt_d)):
            for name, p in module.named_parameters():
                if name not in self.optimizer_steps[prefix]:
                    continue
                opt.state[p] = {
                    "step": torch.tensor(self.optimizer_steps[prefix][name]),
                    "exp_avg": torch.from_numpy(np.array(self.optimizer[f"{prefix}/{name}.exp_avg"], dtype=np.float32)),
                    "exp_avg_sq": torch.from_numpy(np.array(self.optimizer[f"{prefix}/{name}.exp_avg_sq"], dtype=np.float32)),
                }
        return state


def _pack(tensors: dict[str, np.ndarray]) -> tuple[bytes, list[dict]]:
    buf = io.BytesIO()
    index = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": buf.tell()})
        buf.write(arr.tobytes())
    return buf.getvalue(), index


def _unpack(blob: bytes, index: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for e in index:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).copy()
    return out


def _archive_members(ckpt: Checkpoint) -> dict[str, bytes]:
    members = {"architecture.json": json.dumps(ckpt.descriptor, indent=2, sort_keys=True).encode(),
               "config.json": json.dumps(ckpt.config, indent=2, sort_keys=True).encode()}
    meta = {"format": FORMAT_VERSION, "epoch": ckpt.epoch, "step": ckpt.step,
            "split_fingerprint": ckpt.split_fingerprint, "optimizer_steps": ckpt.optimizer_steps,
            "blobs": {}}
    for key, tensors in (("generator", ckpt.generator), ("discriminator", ckpt.discriminator),
                         ("optimizer", ckpt.optimizer)):
        blob, index = _pack(tensors)
        members[f"{key}.bin"] = blob
        meta["blobs"][key] = index
    members["meta.json"] = json.dumps(meta, indent=2, sort_keys=True).encode()
    return members


def _digest(members: dict[str, bytes]) -> str:
    h = hashlib.sha256()
    for name in sorted(members):
        h.update(name.encode() + b"\0")
        h.update(hashlib.sha256(members[name]).digest())
    return h.hexdigest()


def save_checkpoint(state_or_ckpt, path) -> Path:
    """Write a single self-describing zip archive with a content checksum."""
    ckpt = state_or_ckpt if isinstance(state_or_ckpt, Checkpoint) else Checkpoint.from_state(state_or_ckpt)
    members = _archive_members(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(members):
            zf.writestr(zipfile.ZipInfo(name, _ZIP_DATE), members[name])
        zf.writestr(zipfile.ZipInfo("checksum.sha256", _ZIP_DATE), _digest(members))
    tmp.replace(path)
    return path


def load_checkpoint(path, scheme: SchemeConfig | str | None = None) -> Checkpoint:
    """Read and verify an archive; ``scheme`` (if given) must match the stored one."""
    try:
        with zipfile.ZipFile(path) as zf:
            members = {n: zf.read(n) for n in zf.namelist()}
    except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ChecksumError(f"{path}: unreadable checkpoint ({exc})") from exc
    stored = members.pop("checksum.sha256", b"").decode(errors="replace")
    if not stored or stored != _digest(members):
        raise ChecksumError(f"{path}: checksum mismatch")
    try:
        meta = json.loads(members["meta.json"])
        descriptor = json.loads(members["architecture.json"])
        config = json.loads(members["config.json"])
        blobs = {k: _unpack(members[f"{k}.bin"], meta["blobs"][k])
                 for k in ("generator", "discriminator", "optimizer")}
    except (KeyError, ValueError) as exc:
        raise ChecksumError(f"{path}: malformed checkpoint ({exc})") from exc

    if scheme is not None:
        want = scheme if isinstance(scheme, SchemeConfig) else None
        name = scheme.scheme if want else scheme
        have = descriptor["config"]
        if have["scheme"] != name or (want and describe(want) != descriptor):
            raise ConfigError(f"{path}: checkpoint holds scheme {have['scheme']!r} "
                              f"(size {have['image_size']}), requested {name!r}")
    return Checkpoint(descriptor, config, blobs["generator"], blobs["discriminator"],
                      blobs["optimizer"], meta["optimizer_steps"], meta["epoch"], meta["step"],
                      meta.get("split_fingerprint", ""))


# --------------------------------------------------------------------------- inference

def _prepare_input(X, size: int) -> np.ndarray:
    a = np.asarray(X)
    if a.ndim == 2:
        a = a[..., None].repeat(3, axis=-1)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ShapeError(f"input must be H x W or H x W x 3, got {a.shape}")
    if a.shape[:2] != (size, size):
        raise ShapeError(f"input is {a.shape[0]}x{a.shape[1]}, checkpoint expects {size}x{size}")
    if np.issubdtype(a.dtype, np.integer):
        return dp.normalize(a)
    return a.astype(np.float32)


@torch.no_grad()
def predict(ckpt: Checkpoint, X, training: bool = False) -> np.ndarray:
    """Raw normalized generator output, H x W x 3T."""
    gen = ckpt.get_generator()
    x = _prepare_input(X, gen.cfg.image_size)
    return from_batch(generator_forward(gen, to_batch([x]), training=training))[0]


def split_outputs(out: np.ndarray, tasks: Sequence[str]) -> list[np.ndarray]:
    """Denormalize a raw output into one 8-bit image per task.

    The mask comes back as RGB; the suppressed image as grayscale (channel mean).
    """
    images = []
    for i, t in enumerate(tasks):
        part = out[..., 3 * i:3 * i + 3]
        images.append(dp.denormalize(part) if t == TASK_SEG else dp.denormalize(part.astype(np.float64).mean(axis=-1)))
    return images


def infer(ckpt: Checkpoint, X, training: bool = False) -> list[np.ndarray]:
    """Translate one input image into T 8-bit output images."""
    return split_outputs(predict(ckpt, X, training), ckpt.scheme.tasks)
