"""Dataset loading, preprocessing, synthetic generation and splits."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

#: The 14 pathology names, in canonical report order. Index in this tuple is
#: the pathology id used everywhere downstream.
PATHOLOGIES: tuple[str, ...] = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)

N_PATHOLOGIES = len(PATHOLOGIES)

_PATHOLOGY_INDEX = {name: i for i, name in enumerate(PATHOLOGIES)}

POSITIVE = 1
NEGATIVE = 0

UNCERTAIN_POLICIES = ("negative", "positive")


def pathology_index(name: str) -> int:
    """Map a pathology name (or a ``P<k>`` alias) to its index."""
    if name in _PATHOLOGY_INDEX:
        return _PATHOLOGY_INDEX[name]
    if name.startswith("P") and name[1:].isdigit():
        k = int(name[1:])
        if 0 <= k < N_PATHOLOGIES:
            return k
    raise KeyError(f"unknown pathology: {name!r}")


def pathology_name(index: int) -> str:
    return PATHOLOGIES[index]


class ManifestSchemaError(ValueError):
    """Manifest header is missing required columns."""


class ManifestRowError(ValueError):
    """A manifest row holds an unparseable label cell."""

    def __init__(self, row: int, column: str, value) -> None:
        super().__init__(f"row {row}: column {column!r} has unparseable value {value!r}")
        self.row = row
        self.column = column
        self.value = value


class ImageDecodeError(ValueError):
    """Raw bytes could not be decoded as an image."""


@dataclass(frozen=True)
class PreprocessConfig:
    """Resize/crop/normalization settings applied to every image.

    ``mean``/``std`` are optional per-channel constants; when unset, pixels
    stay in [0, 1].
    """

    resize_to: int = 320
    crop_to: int = 224
    crop_mode: str = "center"
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.crop_to > self.resize_to:
            raise ValueError(
                f"crop_to ({self.crop_to}) must not exceed resize_to ({self.resize_to})"
            )
        if self.crop_mode != "center":
            raise ValueError(f"unsupported crop_mode: {self.crop_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        mean = tuple(d["mean"]) if d.get("mean") is not None else None
        std = tuple(d["std"]) if d.get("std") is not None else None
        return cls(
            resize_to=d["resize_to"],
            crop_to=d["crop_to"],
            crop_mode=d.get("crop_mode", "center"),
            mean=mean,
            std=std,
        )


@dataclass
class ImageRecord:
    """One study image with its 14 ternary-resolved labels and pixels."""

    image_id: str
    source: str
    labels: np.ndarray  # shape (14,), int8, values {0, 1}
    pixels: np.ndarray | None  # shape (3, crop, crop), float32

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.shape != (N_PATHOLOGIES,):
            raise ValueError(f"labels must have exactly {N_PATHOLOGIES} entries")


def _resize_channel(chan: np.ndarray, size: int) -> np.ndarray:
    if chan.shape == (size, size):
        return chan
    img = Image.fromarray(chan.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32)


def _center_crop(pixels: np.ndarray, size: int) -> np.ndarray:
    _, h, w = pixels.shape
    top = (h - size) // 2
    left = (w - size) // 2
    return pixels[:, top : top + size, left : left + size]


def preprocess_array(pixels: np.ndarray, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Resize then center-crop a (3, H, W) or (H, W) float array in [0, 1].

    Identity (up to resampling) when the input already has the target size;
    exact identity when resize_to == crop_to == input size.
    """
    if cfg is None:
        cfg = PreprocessConfig()
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim == 2:
        pixels = np.stack([pixels] * 3)
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) pixels, got shape {pixels.shape}")
    if not np.all(np.isfinite(pixels)):
        raise ValueError("pixels contain non-finite values")
    resized = np.stack([_resize_channel(c, cfg.resize_to) for c in pixels])
    out = _center_crop(resized, cfg.crop_to)
    if cfg.mean is not None and cfg.std is not None:
        mean = np.asarray(cfg.mean, dtype=np.float32).reshape(3, 1, 1)
        std = np.asarray(cfg.std, dtype=np.float32).reshape(3, 1, 1)
        out = (out - mean) / std
    return np.ascontiguousarray(out, dtype=np.float32)


def preprocess_image(raw: bytes, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Decode image bytes, convert to RGB, resize and center-crop.

    Returns a (3, crop_to, crop_to) float32 array; grayscale inputs are
    replicated across the three channels by the RGB conversion.
    """
    if cfg is None:
        cfg = PreprocessConfig()
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image bytes: {exc}") from exc
    rgb = img.convert("RGB")
    if rgb.size != (cfg.resize_to, cfg.resize_to):
        rgb = rgb.resize((cfg.resize_to, cfg.resize_to), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    pixels = np.transpose(arr, (2, 0, 1))
    cropped = _center_crop(pixels, cfg.crop_to)
    if cfg.mean is not None and cfg.std is not None:
        mean = np.asarray(cfg.mean, dtype=np.float32).reshape(3, 1, 1)
        std = np.asarray(cfg.std, dtype=np.float32).reshape(3, 1, 1)
        cropped = (cropped - mean) / std
    return np.ascontiguousarray(cropped, dtype=np.float32)


def _parse_label_cell(value, row: int, column: str, policy: str) -> int:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return NEGATIVE
    if isinstance(value, str):
        stripped = value.strip()
        if stripped == "":
            return NEGATIVE
        try:
            value = float(stripped)
        except ValueError:
            raise ManifestRowError(row, column, value) from None
    try:
        numeric = float(value)
    except (TypeError, ValueError):
        raise ManifestRowError(row, column, value) from None
    if numeric == 1.0:
        return POSITIVE
    if numeric == 0.0:
        return NEGATIVE
    if numeric == -1.0:
        return POSITIVE if policy == "positive" else NEGATIVE
    raise ManifestRowError(row, column, value)


def load_manifest(
    path: str | Path,
    policy: str = "negative",
    cfg: PreprocessConfig | None = None,
    load_pixels: bool = True,
) -> list[ImageRecord]:
    """Load a CSV manifest (Path column + the 14 pathology columns).

    Uncertain (-1.0) labels are mapped per ``policy``; blank cells map to
    negative. Image paths are resolved relative to the manifest location.
    """
    if policy not in UNCERTAIN_POLICIES:
        raise ValueError(f"policy must be one of {UNCERTAIN_POLICIES}, got {policy!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in ("Path", *PATHOLOGIES) if c not in df.columns]
    if missing:
        raise ManifestSchemaError(f"manifest missing columns: {missing}")
    root = path.parent
    records = []
    for row_idx, row in enumerate(df.itertuples(index=False)):
        row_map = dict(zip(df.columns, row))
        labels = np.zeros(N_PATHOLOGIES, dtype=np.int8)
        for k, name in enumerate(PATHOLOGIES):
            labels[k] = _parse_label_cell(row_map[name], row_idx, name, policy)
        image_path = row_map["Path"]
        pixels = None
        if load_pixels:
            pixels = preprocess_image((root / image_path).read_bytes(), cfg)
        records.append(
            ImageRecord(image_id=image_path, source=str(root / image_path), labels=labels, pixels=pixels)
        )
    return records


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale synthetic dataset: a bright Gaussian blob per pathology.

    Pathology k's blob sits at a fixed, k-specific location, so labels and
    visual markers agree by construction. Same (spec, n_images) always yields
    a byte-identical dataset.
    """

    image_size: int = 64
    n_pathologies: int = 2
    signal_kind: str = "gaussian-blob"
    noise_sigma: float = 0.05
    prevalence: float = 0.5
    seed: int = 0
    blob_amplitude: float = 0.6
    background: float = 0.2

    def __post_init__(self) -> None:
        if not (1 <= self.n_pathologies <= N_PATHOLOGIES):
            raise ValueError("n_pathologies must be in [1, 14]")
        if self.signal_kind != "gaussian-blob":
            raise ValueError(f"unsupported signal_kind: {self.signal_kind!r}")
        if not (0.0 < self.prevalence < 1.0):
            raise ValueError("prevalence must be in (0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


def _blob_center(k: int, size: int) -> tuple[float, float]:
    # 4x4 grid of well-separated locations; pathology k takes cell k.
    row, col = divmod(k, 4)
    cy = size * (0.125 + 0.25 * row)
    cx = size * (0.125 + 0.25 * col)
    return cy, cx


def _marker(k: int, size: int, amplitude: float) -> np.ndarray:
    cy, cx = _blob_center(k, size)
    yy, xx = np.mgrid[0:size, 0:size]
    sigma = size / 12.0
    return amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))


def generate_synthetic_dataset(spec: SyntheticSpec, n_images: int) -> list[ImageRecord]:
    """Generate ``n_images`` labeled records; pure function of (spec, n_images)."""
    if n_images <= 0:
        raise ValueError("n_images must be > 0")
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    markers = [_marker(k, size, spec.blob_amplitude) for k in range(spec.n_pathologies)]
    records = []
    for i in range(n_images):
        labels = np.zeros(N_PATHOLOGIES, dtype=np.int8)
        labels[: spec.n_pathologies] = rng.random(spec.n_pathologies) < spec.prevalence
        img = np.full((size, size), spec.background, dtype=np.float64)
        if spec.noise_sigma > 0:
            img += rng.normal(0.0, spec.noise_sigma, (size, size))
        else:
            rng.normal(0.0, 1.0, (size, size))  # keep the stream aligned across sigmas
        for k in range(spec.n_pathologies):
            if labels[k]:
                img += markers[k]
        img = np.clip(img, 0.0, 1.0)
        # Quantize to the 8-bit grid so saved PNGs reload to identical pixels.
        img = np.round(img * 255.0) / 255.0
        pixels = np.stack([img, img, img]).astype(np.float32)
        image_id = f"synth{spec.seed}-{i:05d}"
        records.append(
            ImageRecord(image_id=image_id, source=f"synthetic:{image_id}", labels=labels, pixels=pixels)
        )
    return records


def split_dataset(
    records: list[ImageRecord], fractions: tuple[float, float], seed: int
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Deterministic disjoint (train, eval) partition of ``records``.

    Records are canonically sorted by image_id before shuffling, so any input
    ordering yields the same split.
    """
    if not records:
        raise ValueError("cannot split an empty record list")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    ordered = sorted(records, key=lambda r: r.image_id)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    n_train = int(round(fractions[0] * len(ordered)))
    train = [ordered[i] for i in perm[:n_train]]
    evaluation = [ordered[i] for i in perm[n_train:]]
    return train, evaluation


def write_dataset(records: list[ImageRecord], out_dir: str | Path, spec: SyntheticSpec | None = None,
                  preprocess: PreprocessConfig | None = None) -> Path:
    """Persist records as images/ + manifest.csv + dataset.json.

    The manifest uses the same CSV schema as ingested datasets (Path column
    plus the 14 pathology columns), so downstream stages see one input shape.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        if rec.pixels is None:
            raise ValueError(f"record {rec.image_id} has no pixels to write")
        rel = f"images/{rec.image_id}.png"
        rgb = np.round(np.transpose(rec.pixels, (1, 2, 0)) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(out_dir / rel)
        rows.append([rel] + [f"{float(v):.1f}" for v in rec.labels])
    df = pd.DataFrame(rows, columns=["Path", *PATHOLOGIES])
    df.to_csv(out_dir / "manifest.csv", index=False)
    meta = {
        "kind": "synthetic" if spec is not None else "ingested",
        "n_images": len(records),
        "preprocess": (preprocess or default_synthetic_preprocess(spec)).to_dict()
        if (preprocess is not None or spec is not None)
        else PreprocessConfig().to_dict(),
        "spec": spec.to_dict() if spec is not None else None,
    }
    (out_dir / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out_dir


def default_synthetic_preprocess(spec: SyntheticSpec | None) -> PreprocessConfig:
    """Identity-size preprocessing for synthetic images."""
    size = spec.image_size if spec is not None else 64
    return PreprocessConfig(resize_to=size, crop_to=size)


def load_dataset_dir(path: str | Path, policy: str = "negative") -> tuple[list[ImageRecord], dict]:
    """Load a dataset directory written by :func:`write_dataset` (or `ingest`)."""
    path = Path(path)
    meta = json.loads((path / "dataset.json").read_text())
    cfg = PreprocessConfig.from_dict(meta["preprocess"])
    records = load_manifest(path / "manifest.csv", policy=policy, cfg=cfg)
    return records, meta
