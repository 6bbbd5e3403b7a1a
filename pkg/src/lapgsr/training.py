"""Adversarial training: losses, augmentation, patch sampling and the loop.

Each batch runs one discriminator update on real HR patches against
detached generator outputs, then one generator update on
``lam * mse + adversarial``.  Everything is seeded from ``TrainConfig.seed``
so two runs with the same config and corpus write identical bytes.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from lapgsr.autograd import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    mean,
    mse,
    relu,
    scale,
    shift,
    softplus,
    square,
    sub,
)
from lapgsr.checkpoint import GENERATOR_PREFIX, load_checkpoint, save_checkpoint
from lapgsr.data import DatasetSplit
from lapgsr.errors import DataError, NonFiniteError, ShapeError
from lapgsr.metrics import evaluate
from lapgsr.model import Discriminator, Generator, GeneratorConfig, frozen

GAN_VARIANTS = ("lsgan", "vanilla", "wgan", "hinge")
LOG_HEADER = ["epoch", "step", "l_mse", "l_g_adv", "l_d", "l_total", "val_psnr", "val_ssim"]


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 4500.0
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    batch: int = 12
    epochs: int = 30
    seed: int = 0
    lr_patch: tuple[int, int] = (40, 30)   # (width, height) of the thermal input patch
    flip_prob: float = 0.5
    shift_limit: float = 0.0
    gan_variant: str = "lsgan"
    checkpoint_every: int = 1              # epochs; 0 keeps only best and last
    max_steps_per_epoch: int | None = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0 <= self.shift_limit < 0.5:
            raise ValueError(f"shift_limit must lie in [0, 0.5), got {self.shift_limit}")
        if self.gan_variant not in GAN_VARIANTS:
            raise ValueError(f"gan_variant must be one of {GAN_VARIANTS}, got {self.gan_variant!r}")
        if self.batch < 1 or self.epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("batch must be positive; epochs and checkpoint_every non-negative")
        if len(self.lr_patch) != 2 or min(self.lr_patch) < 4:
            raise ValueError(f"lr_patch must be (width, height) of at least 4 px, got {self.lr_patch}")
        object.__setattr__(self, "lr_patch", tuple(int(v) for v in self.lr_patch))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_patch"] = list(self.lr_patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        d = dict(d)
        if "generator" in d and not isinstance(d["generator"], GeneratorConfig):
            d["generator"] = GeneratorConfig.from_dict(d["generator"])
        if "lr_patch" in d:
            d["lr_patch"] = tuple(d["lr_patch"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {path} is not valid JSON: {exc}") from None


@dataclass
class LossTerms:
    l_mse: float
    l_g_adv: float
    l_d: float
    l_total: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.l_mse, self.l_g_adv, self.l_d, self.l_total


# ---------------------------------------------------------------- losses

def gan_g_loss(d_fake, variant: str = "lsgan") -> Tensor:
    if variant == "lsgan":
        return scale(mean(square(shift(d_fake, -1.0))), 0.5)
    if variant == "vanilla":
        # non-saturating: -log sigmoid(d) = softplus(-d)
        return mean(softplus(scale(d_fake, -1.0)))
    if variant in ("wgan", "hinge"):
        return scale(mean(d_fake), -1.0)
    raise ValueError(f"unknown gan variant {variant!r}")


def gan_d_loss(d_real, d_fake, variant: str = "lsgan") -> Tensor:
    if variant == "lsgan":
        return add(scale(mean(square(shift(d_real, -1.0))), 0.5), scale(mean(square(d_fake)), 0.5))
    if variant == "vanilla":
        return add(mean(softplus(scale(d_real, -1.0))), mean(softplus(d_fake)))
    if variant == "wgan":
        return sub(mean(d_fake), mean(d_real))
    if variant == "hinge":
        return add(mean(relu(shift(scale(d_real, -1.0), 1.0))), mean(relu(shift(d_fake, 1.0))))
    raise ValueError(f"unknown gan variant {variant!r}")


def combined_loss(l_mse, l_g_adv, lam: float) -> Tensor:
    return add(scale(l_mse, lam), l_g_adv)


# ---------------------------------------------------------------- augmentation

Triple = tuple[np.ndarray, np.ndarray, np.ndarray]


def flip_triple(triple: Triple, horizontal: bool, vertical: bool) -> Triple:
    out = []
    for img in triple:
        if horizontal:
            img = img[..., ::-1]
        if vertical:
            img = img[..., ::-1, :]
        out.append(np.ascontiguousarray(img))
    return tuple(out)


def augment_flip(triple: Triple, rng: np.random.Generator, p: float = 0.5) -> Triple:
    """Flip guide and both thermal images together; axes decided independently."""
    horizontal = bool(rng.random() < p)
    vertical = bool(rng.random() < p)
    return flip_triple(triple, horizontal, vertical)


def shift_image(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate content by (dx, dy) pixels, replicating the border into the gap."""
    h, w = img.shape[-2:]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[..., rows[:, None], cols[None, :]]


def draw_shift(extents: tuple[int, int], shift_limit: float, rng: np.random.Generator) -> tuple[int, int]:
    h, w = extents
    dx = int(np.rint(rng.uniform(-shift_limit * w, shift_limit * w)))
    dy = int(np.rint(rng.uniform(-shift_limit * h, shift_limit * h)))
    return dx, dy


def augment_shift(guide: np.ndarray, shift_limit: float, rng: np.random.Generator) -> np.ndarray:
    """Misalign the guide alone by a random integer offset up to ``shift_limit`` of each extent."""
    if shift_limit == 0:
        return guide
    dx, dy = draw_shift(guide.shape[-2:], shift_limit, rng)
    return shift_image(guide, dx, dy)


class PatchTriple(NamedTuple):
    guide: np.ndarray
    thermal_lr: np.ndarray
    thermal_hr: np.ndarray
    lr_offset: tuple[int, int]   # (row, col) in the thermal input


def sample_patches(triple: Triple, lr_patch: tuple[int, int], rng: np.random.Generator) -> PatchTriple:
    """Crop an aligned patch; the HR windows sit at four times the LR offset."""
    guide, t_lr, t_hr = triple
    pw, ph = lr_patch
    h, w = t_lr.shape[-2:]
    if h < ph or w < pw:
        raise ShapeError(f"thermal input {w}x{h} is smaller than the {pw}x{ph} patch",
                         expected=(ph, pw), got=(h, w))
    oy = int(rng.integers(0, h - ph + 1))
    ox = int(rng.integers(0, w - pw + 1))
    hr = (slice(4 * oy, 4 * (oy + ph)), slice(4 * ox, 4 * (ox + pw)))
    return PatchTriple(
        guide=guide[..., hr[0], hr[1]],
        thermal_lr=t_lr[..., oy:oy + ph, ox:ox + pw],
        thermal_hr=t_hr[..., hr[0], hr[1]],
        lr_offset=(oy, ox),
    )


def make_batch(samples: Sequence, cfg: TrainConfig, rng: np.random.Generator) -> Triple:
    """Shift, crop and flip each sample in order, then stack along a batch axis."""
    guides, lrs, hrs = [], [], []
    for s in samples:
        guide = augment_shift(s.guide, cfg.shift_limit, rng)
        patch = sample_patches((guide, s.thermal_lr, s.thermal_hr), cfg.lr_patch, rng)
        g, lr, hr = augment_flip(patch[:3], rng, cfg.flip_prob)
        guides.append(g)
        lrs.append(lr)
        hrs.append(hr)
    return np.stack(guides), np.stack(lrs), np.stack(hrs)


# ---------------------------------------------------------------- one step

@dataclass
class OptimState:
    adam_g: AdamState
    adam_d: AdamState

    @classmethod
    def fresh(cls, generator: Generator, discriminator: Discriminator) -> "OptimState":
        return cls(AdamState.for_params(generator.parameters()),
                   AdamState.for_params(discriminator.parameters()))


def _finite(value: Tensor, name: str) -> float:
    v = value.item()
    if not math.isfinite(v):
        raise NonFiniteError(f"training loss term {name} is not finite ({v})", where=name)
    return v


def _grads(module) -> dict[str, np.ndarray | None]:
    return {k: p.grad for k, p in module.parameters().items()}


def discriminator_update(fake: np.ndarray, real: np.ndarray, discriminator: Discriminator,
                         state: AdamState, cfg: TrainConfig) -> float:
    discriminator.zero_grad()
    with Tape() as tape:
        l_d = gan_d_loss(discriminator(real), discriminator(fake), cfg.gan_variant)
    value = _finite(l_d, "l_d")
    backward(l_d, tape)
    adam_step(discriminator.parameters(), _grads(discriminator), state, cfg.lr_d)
    discriminator.zero_grad()
    return value


def generator_gradients(batch: Triple, generator: Generator, discriminator: Discriminator,
                        cfg: TrainConfig, output=None, tape: Tape | None = None):
    """Generator loss terms and parameter gradients; the discriminator stays frozen.

    Returns ``(l_mse, l_g_adv, l_total, grads)``.  Pass ``output``/``tape``
    to reuse a forward pass already recorded on ``tape``.
    """
    guide, t_lr, t_hr = batch
    generator.zero_grad()
    if output is None:
        tape = Tape()
        with tape:
            output = generator(guide, t_lr)
    with tape, frozen(discriminator):
        # pixel loss on the unclamped collapse so out-of-range pixels still get a gradient
        l_mse = mse(output.y_raw, t_hr)
        l_adv = gan_g_loss(discriminator(output.y), cfg.gan_variant)
        total = combined_loss(l_mse, l_adv, cfg.lam)
    terms = (_finite(l_mse, "l_mse"), _finite(l_adv, "l_g_adv"), _finite(total, "l_total"))
    backward(total, tape)
    return (*terms, _grads(generator))


def train_step(batch: Triple, generator: Generator, discriminator: Discriminator,
               states: OptimState, cfg: TrainConfig) -> LossTerms:
    guide, t_lr, t_hr = batch
    tape = Tape()
    with tape:
        out = generator(guide, t_lr)
    l_d = discriminator_update(out.y.data, t_hr, discriminator, states.adam_d, cfg)
    l_mse, l_adv, l_total, grads = generator_gradients(batch, generator, discriminator, cfg,
                                                       output=out, tape=tape)
    adam_step(generator.parameters(), grads, states.adam_g, cfg.lr_g)
    generator.zero_grad()
    return LossTerms(l_mse=l_mse, l_g_adv=l_adv, l_d=l_d, l_total=l_total)


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    out_dir: Path
    log_path: Path
    best_path: Path
    last_path: Path
    history: list[LossTerms]
    best_psnr: float


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def _full_state(generator, discriminator, states: OptimState) -> dict[str, np.ndarray]:
    arrays = {GENERATOR_PREFIX + k: v for k, v in generator.state_arrays().items()}
    arrays.update({"discriminator." + k: v for k, v in discriminator.state_arrays().items()})
    for tag, st in (("adam_g", states.adam_g), ("adam_d", states.adam_d)):
        arrays.update({f"{tag}.m.{k}": v for k, v in st.m.items()})
        arrays.update({f"{tag}.v.{k}": v for k, v in st.v.items()})
    return arrays


def _restore(path, generator, discriminator, states: OptimState) -> dict:
    arrays, manifest = load_checkpoint(path)

    def strip(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    try:
        generator.load_arrays(strip(GENERATOR_PREFIX))
        discriminator.load_arrays(strip("discriminator."))
    except ShapeError as exc:
        raise DataError(f"{path}: cannot resume, {exc}") from None
    meta = manifest["meta"]
    if "data_rng" not in meta:
        raise DataError(f"{path} holds no optimizer state; resume needs a training checkpoint")
    for tag, st in (("adam_g", states.adam_g), ("adam_d", states.adam_d)):
        st.t = int(meta[f"{tag}_t"])
        for k in st.m:
            st.m[k] = strip(f"{tag}.m.")[k].copy()
            st.v[k] = strip(f"{tag}.v.")[k].copy()
    return meta


def init_models(cfg: TrainConfig):
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    g_seq, d_seq = init_seq.spawn(2)
    generator = Generator(cfg.generator, np.random.default_rng(g_seq))
    discriminator = Discriminator(cfg.generator.channels, np.random.default_rng(d_seq))
    return generator, discriminator, np.random.default_rng(data_seq)


def train_loop(dataset: DatasetSplit, cfg: TrainConfig, out_dir, resume=None,
               progress: Callable[[str], None] | None = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, logging one CSV row and validating once per epoch.

    Writes ``train_log.csv`` and ``checkpoints/{epoch_NNNN,best,last}.{json,bin}``
    under ``out_dir``.  ``resume`` points at a checkpoint written by this loop.
    """
    train = dataset.train
    if not train:
        raise DataError("training split is empty")
    if dataset.channels != cfg.generator.channels:
        raise ShapeError(f"dataset has {dataset.channels} channels, generator expects "
                         f"{cfg.generator.channels}")
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {ckpt_dir}: {exc}") from None
    log_path = out_dir / "train_log.csv"
    say = progress or (lambda msg: None)

    generator, discriminator, data_rng = init_models(cfg)
    states = OptimState.fresh(generator, discriminator)
    start_epoch, global_step, best_psnr = 1, 0, -math.inf
    rows: list[list[str]] = []
    if resume is not None:
        meta = _restore(resume, generator, discriminator, states)
        data_rng.bit_generator.state = meta["data_rng"]
        start_epoch = int(meta["epoch"]) + 1
        global_step = int(meta["global_step"])
        best_psnr = float(meta["best_psnr"])
        if log_path.exists():
            with open(log_path, newline="") as fh:
                rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) < start_epoch]

    def checkpoint(path, epoch):
        meta = {
            "epoch": epoch,
            "global_step": global_step,
            "best_psnr": best_psnr,
            "adam_g_t": states.adam_g.t,
            "adam_d_t": states.adam_d.t,
            "data_rng": data_rng.bit_generator.state,
            "train_config": cfg.to_dict(),
        }
        try:
            return save_checkpoint(path, _full_state(generator, discriminator, states),
                                   cfg.generator, meta)
        except OSError as exc:
            raise DataError(f"checkpoint write failed at {path}: {exc}") from None

    def write_log():
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_HEADER)
            writer.writerows(rows)

    history: list[LossTerms] = []
    write_log()
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = data_rng.permutation(len(train))
        batches = [order[i:i + cfg.batch] for i in range(0, len(order), cfg.batch)]
        if cfg.max_steps_per_epoch is not None:
            batches = batches[:cfg.max_steps_per_epoch]
        epoch_terms = []
        for idx in batches:
            batch = make_batch([train[i] for i in idx], cfg, data_rng)
            terms = train_step(batch, generator, discriminator, states, cfg)
            global_step += 1
            epoch_terms.append(terms)
            history.append(terms)
        means = np.mean([t.as_tuple() for t in epoch_terms], axis=0)

        if dataset.val:
            report = evaluate(generator, dataset.val)
            val_psnr, val_ssim = report.mean_psnr, report.mean_ssim
        else:
            val_psnr = val_ssim = math.nan
        rows.append([str(epoch), str(global_step), *(_fmt(v) for v in means),
                     _fmt(val_psnr), _fmt(val_ssim)])
        write_log()
        say(f"epoch {epoch}/{cfg.epochs} step {global_step} l_mse={means[0]:.6f} "
            f"l_g_adv={means[1]:.4f} l_d={means[2]:.4f} val_psnr={val_psnr:.3f} val_ssim={val_ssim:.4f}")

        improved = not dataset.val or val_psnr > best_psnr
        if improved and dataset.val:
            best_psnr = val_psnr
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            checkpoint(ckpt_dir / f"epoch_{epoch:04d}", epoch)
        if improved:
            checkpoint(ckpt_dir / "best", epoch)
        checkpoint(ckpt_dir / "last", epoch)

    return TrainResult(out_dir=out_dir, log_path=log_path, best_path=ckpt_dir / "best.json",
                       last_path=ckpt_dir / "last.json", history=history, best_psnr=best_psnr)
