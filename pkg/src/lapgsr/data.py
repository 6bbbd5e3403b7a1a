"""Image files, dataset loading and the synthetic RGB/thermal corpus.

On-disk layout (for real and synthetic data alike)::

    root/{train,val,test}/{rgb,thermal_lr,thermal_hr}/<id>.png

Images are 8-bit PNG, held in memory as float32 ``(channels, h, w)``
arrays in [0, 1].
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from lapgsr.errors import DataError, ShapeError
from lapgsr.pyramid import down2, grayscale

SPLITS = ("train", "val", "test")
FOLDERS = ("rgb", "thermal_lr", "thermal_hr")
MODES = ("gray", "color")


# ---------------------------------------------------------------- image files

def to_unit(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float32) / np.float32(255)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def decode_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB file as a ``(c, h, w)`` float32 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I;16N", "I"):
                raise DataError(f"{path}: 16-bit images are not supported (8-bit only)")
            if mode not in ("L", "RGB"):
                raise DataError(f"{path}: unsupported image mode {mode!r}; expected 8-bit L or RGB")
            arr = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from None
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return to_unit(arr)


def encode_image(path, image: np.ndarray) -> Path:
    """Write a ``(c, h, w)`` image (float in [0, 1] or uint8) as an 8-bit PNG."""
    path = Path(path)
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"encode_image expects (1|3, h, w), got {image.shape}", got=image.shape)
    pixels = image if image.dtype == np.uint8 else to_uint8(image)
    pixels = pixels[0] if pixels.shape[0] == 1 else pixels.transpose(1, 2, 0)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PNG")
    return path


# ---------------------------------------------------------------- datasets

@dataclass
class SamplePair:
    guide: np.ndarray
    thermal_lr: np.ndarray
    thermal_hr: np.ndarray
    id: str


@dataclass
class DatasetSplit:
    train: list[SamplePair] = field(default_factory=list)
    val: list[SamplePair] = field(default_factory=list)
    test: list[SamplePair] = field(default_factory=list)
    mode: str = "gray"

    def split(self, name: str) -> list[SamplePair]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    @property
    def channels(self) -> int:
        return 1 if self.mode == "gray" else 3


def _ids(folder: Path) -> set[str]:
    return {p.stem for p in folder.glob("*.png")} if folder.is_dir() else set()


def _load_pair(split_dir: Path, sample_id: str, mode: str) -> SamplePair:
    guide = decode_image(split_dir / "rgb" / f"{sample_id}.png")
    t_lr = decode_image(split_dir / "thermal_lr" / f"{sample_id}.png")
    t_hr = decode_image(split_dir / "thermal_hr" / f"{sample_id}.png")
    want = 1 if mode == "gray" else 3
    if mode == "gray" and guide.shape[0] == 3:
        guide = grayscale(guide[None]).data[0]
    if guide.shape[0] != want:
        raise DataError(f"{sample_id}: guide has {guide.shape[0]} channels, {mode} mode needs {want}")
    for name, t in (("thermal_lr", t_lr), ("thermal_hr", t_hr)):
        if t.shape[0] != want:
            raise DataError(f"{sample_id}: {name} has {t.shape[0]} channels, {mode} mode needs {want}")
    gh, gw = guide.shape[1:]
    if t_hr.shape[1:] != (gh, gw):
        raise DataError(f"{sample_id}: thermal_hr is {t_hr.shape[2]}x{t_hr.shape[1]} "
                        f"but the guide is {gw}x{gh}")
    if (4 * t_lr.shape[1], 4 * t_lr.shape[2]) != (gh, gw):
        raise DataError(f"{sample_id}: thermal_lr is {t_lr.shape[2]}x{t_lr.shape[1]}, "
                        f"expected exactly a quarter of the guide's {gw}x{gh}")
    return SamplePair(guide=guide, thermal_lr=t_lr, thermal_hr=t_hr, id=sample_id)


def load_dataset(root, mode: str = "gray") -> DatasetSplit:
    """Load every split under ``root``; missing or empty splits load as empty lists."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    out = DatasetSplit(mode=mode)
    seen: dict[str, str] = {}
    for split in SPLITS:
        split_dir = root / split
        ids = [_ids(split_dir / f) for f in FOLDERS]
        union = set().union(*ids)
        for sample_id in sorted(union):
            for folder, present in zip(FOLDERS, ids):
                if sample_id not in present:
                    raise DataError(f"{split}: sample {sample_id!r} has no {folder}/{sample_id}.png")
            if sample_id in seen:
                raise DataError(f"sample id {sample_id!r} appears in both {seen[sample_id]} and {split}")
            seen[sample_id] = split
            out.split(split).append(_load_pair(split_dir, sample_id, mode))
    return out


# ---------------------------------------------------------------- synthetic corpus

SYNTH_PARAMS = {
    "shapes_min": 5,
    "shapes_max": 20,
    "supersample": 2,
    "texture_noise_std": 0.02,
    "thermal_blur_sigma": 1.0,
    "size_range": [0.06, 0.3],
}


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of the last two axes, reflect boundary."""
    radius = max(1, int(np.ceil(3 * sigma)))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = np.asarray(image, dtype=np.float64)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="symmetric")
        n = out.shape[axis]
        out = sum(t * np.take(padded, np.arange(k, k + n), axis=axis) for k, t in enumerate(taps))
    return out


def _render_scene(rng: np.random.Generator, h: int, w: int):
    p = SYNTH_PARAMS
    ss = p["supersample"]
    H, W = h * ss, w * ss
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    labels = np.zeros((H, W), dtype=np.int32)
    n_shapes = int(rng.integers(p["shapes_min"], p["shapes_max"] + 1))
    colors = rng.random((n_shapes + 1, 3))
    temps = rng.random(n_shapes + 1)
    lo, hi = p["size_range"]
    for k in range(1, n_shapes + 1):
        cy, cx = rng.random() * H, rng.random() * W
        ry, rx = rng.uniform(lo, hi, size=2) * min(H, W)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        if rng.random() < 0.5:
            inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1
        else:
            inside = (np.abs(u) <= rx) & (np.abs(v) <= ry)
        labels[inside] = k

    def box_down(img):
        return img.reshape(img.shape[0], h, ss, w, ss).mean(axis=(2, 4))

    color = box_down(colors[labels].transpose(2, 0, 1))
    temp = box_down(temps[labels][None])
    return color, temp


def synth_sample(seed: int, index: int, hr_extents: tuple[int, int]):
    """One (guide, thermal_lr, thermal_hr) triple as uint8 ``(c, h, w)`` arrays."""
    h, w = hr_extents
    rng = np.random.default_rng([int(seed), int(index)])
    color, temp = _render_scene(rng, h, w)
    noise = rng.normal(0, SYNTH_PARAMS["texture_noise_std"], size=color.shape)
    guide = to_uint8(color + noise)
    thermal_hr = to_uint8(gaussian_blur(temp, SYNTH_PARAMS["thermal_blur_sigma"]))
    lr = down2(down2(to_unit(thermal_hr)[None])).data[0]
    return guide, to_uint8(lr), thermal_hr


def split_counts(n: int) -> dict[str, int]:
    n_held = n // 10
    return {"train": n - 2 * n_held, "val": n_held, "test": n_held}


def synth_generate(n: int, seed: int, out_dir, hr_extents: tuple[int, int] = (240, 320)) -> Path:
    """Write ``n`` synthetic triples under ``out_dir`` and return the manifest path.

    ``hr_extents`` is (height, width).  Output depends only on
    ``(n, seed, hr_extents)``.
    """
    h, w = hr_extents
    if h % 4 or w % 4:
        raise ShapeError(f"extents must be divisible by 4, got {w}x{h}", got=(h, w))
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from None

    counts = split_counts(n)
    assignment = ["train"] * counts["train"] + ["val"] * counts["val"] + ["test"] * counts["test"]
    samples = []
    for i, split in enumerate(assignment):
        sample_id = f"s{i:04d}"
        guide, t_lr, t_hr = synth_sample(seed, i, (h, w))
        base = out_dir / split
        encode_image(base / "rgb" / f"{sample_id}.png", guide)
        encode_image(base / "thermal_lr" / f"{sample_id}.png", t_lr)
        encode_image(base / "thermal_hr" / f"{sample_id}.png", t_hr)
        samples.append({"id": sample_id, "split": split})

    manifest = {
        "generator": "lapgsr-synth",
        "version": 1,
        "n": n,
        "seed": seed,
        "hr_extents": [h, w],
        "lr_extents": [h // 4, w // 4],
        "params": SYNTH_PARAMS,
        "splits": counts,
        "samples": samples,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
