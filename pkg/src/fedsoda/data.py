"""Synthetic heterogeneous federations, channel statistics, and segmentation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

STD_FLOOR = 1e-3
DEFAULT_IMAGE_SIZE = 50


class DatasetSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ClientDatasetSpec:
    client_id: int
    n_samples: int
    image_size: tuple[int, int] = (DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE)
    blob_radius_range: tuple[float, float] = (3.0, 6.0)
    blobs_per_image: tuple[int, int] = (1, 3)
    fg_intensity: float = 0.7
    bg_intensity: float = 0.3
    noise_std: float = 0.05
    seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        h, w = self.image_size
        r_min, r_max = self.blob_radius_range
        lo, hi = self.blobs_per_image
        if self.n_samples < 1:
            errs.append(f"client {self.client_id}: n_samples must be >= 1")
        if h < 1 or w < 1:
            errs.append(f"client {self.client_id}: image_size must be positive")
        if not (0 < r_min <= r_max < min(h, w) / 2):
            errs.append(f"client {self.client_id}: radius range {self.blob_radius_range} must satisfy 0 < r_min <= r_max < {min(h, w) / 2}")
        if not (1 <= lo <= hi):
            errs.append(f"client {self.client_id}: blobs_per_image must satisfy 1 <= lo <= hi")
        for name in ("fg_intensity", "bg_intensity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append(f"client {self.client_id}: {name} must lie in [0, 1]")
        if self.noise_std < 0:
            errs.append(f"client {self.client_id}: noise_std must be >= 0")
        return errs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClientDatasetSpec":
        d = dict(d)
        for key in ("image_size", "blob_radius_range", "blobs_per_image"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class ClientDataset:
    spec: ClientDatasetSpec
    train_images: np.ndarray  # [n, 1, H, W]
    train_masks: np.ndarray
    eval_images: np.ndarray
    eval_masks: np.ndarray
    stats: ChannelStats = field(init=False)

    def __post_init__(self):
        self.stats = compute_stats(self.train_images)

    @property
    def client_id(self) -> int:
        return self.spec.client_id

    @property
    def n_train(self) -> int:
        return len(self.train_images)


# radii bands run small to large; sample counts 10-70
DEFAULT_PRESET = [
    dict(n_samples=10, blob_radius_range=(2, 4), blobs_per_image=(6, 12), fg_intensity=0.75, bg_intensity=0.35, noise_std=0.08),
    dict(n_samples=20, blob_radius_range=(3, 6), blobs_per_image=(4, 8), fg_intensity=0.70, bg_intensity=0.25, noise_std=0.06),
    dict(n_samples=30, blob_radius_range=(5, 10), blobs_per_image=(2, 5), fg_intensity=0.80, bg_intensity=0.40, noise_std=0.10),
    dict(n_samples=50, blob_radius_range=(8, 16), blobs_per_image=(1, 3), fg_intensity=0.65, bg_intensity=0.30, noise_std=0.07),
    dict(n_samples=70, blob_radius_range=(12, 24), blobs_per_image=(1, 2), fg_intensity=0.70, bg_intensity=0.45, noise_std=0.05),
]

# seven clients, 30-210 samples each, for full-length runs
FULL_PRESET = [
    dict(n_samples=30, blob_radius_range=(2, 4), blobs_per_image=(6, 12), fg_intensity=0.75, bg_intensity=0.35, noise_std=0.08),
    dict(n_samples=40, blob_radius_range=(2, 5), blobs_per_image=(5, 10), fg_intensity=0.70, bg_intensity=0.30, noise_std=0.07),
    dict(n_samples=60, blob_radius_range=(3, 6), blobs_per_image=(4, 8), fg_intensity=0.70, bg_intensity=0.25, noise_std=0.06),
    dict(n_samples=50, blob_radius_range=(3, 7), blobs_per_image=(4, 8), fg_intensity=0.60, bg_intensity=0.25, noise_std=0.09),
    dict(n_samples=170, blob_radius_range=(12, 24), blobs_per_image=(1, 2), fg_intensity=0.70, bg_intensity=0.45, noise_std=0.05),
    dict(n_samples=30, blob_radius_range=(2, 5), blobs_per_image=(6, 10), fg_intensity=0.80, bg_intensity=0.40, noise_std=0.10),
    dict(n_samples=210, blob_radius_range=(8, 20), blobs_per_image=(1, 3), fg_intensity=0.65, bg_intensity=0.30, noise_std=0.07),
]

PRESETS = {"default": DEFAULT_PRESET, "full": FULL_PRESET}


def preset_specs(name: str = "default", num_clients: int | None = None,
                 image_size: int = DEFAULT_IMAGE_SIZE) -> list[ClientDatasetSpec]:
    try:
        rows = PRESETS[name]
    except KeyError:
        raise DatasetSpecError(f"unknown data preset {name!r}; choose from {sorted(PRESETS)}") from None
    if num_clients is not None:
        if not 1 <= num_clients <= len(rows):
            raise DatasetSpecError(f"preset {name!r} has {len(rows)} clients, asked for {num_clients}")
        rows = rows[:num_clients]
    return [ClientDatasetSpec(client_id=i, image_size=(image_size, image_size), **row) for i, row in enumerate(rows)]


def _render(spec: ClientDatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    n_blobs = rng.integers(spec.blobs_per_image[0], spec.blobs_per_image[1] + 1)
    for _ in range(n_blobs):
        r = rng.uniform(*spec.blob_radius_range)
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    image = np.where(mask, spec.fg_intensity, spec.bg_intensity)
    if spec.noise_std > 0:
        image = np.clip(image + rng.normal(0.0, spec.noise_std, size=image.shape), 0.0, 1.0)
    return image.astype(np.float32)[None], mask.astype(np.float32)[None]


def generate_client(spec: ClientDatasetSpec, master_seed: int) -> ClientDataset:
    errs = spec.validate()
    if errs:
        raise DatasetSpecError("; ".join(errs))
    rng = np.random.default_rng([master_seed, spec.client_id, spec.seed])
    pairs = [_render(spec, rng) for _ in range(spec.n_samples)]
    images = np.stack([p[0] for p in pairs])
    masks = np.stack([p[1] for p in pairs])
    order = rng.permutation(spec.n_samples)
    n_eval = int(round(0.2 * spec.n_samples)) if spec.n_samples > 1 else 0
    eval_idx, train_idx = np.sort(order[:n_eval]), np.sort(order[n_eval:])
    return ClientDataset(spec, images[train_idx], masks[train_idx], images[eval_idx], masks[eval_idx])


def generate_federation(specs: list[ClientDatasetSpec], master_seed: int) -> list[ClientDataset]:
    if not specs:
        raise DatasetSpecError("federation needs at least one client spec")
    ids = [s.client_id for s in specs]
    if len(set(ids)) != len(ids):
        raise DatasetSpecError(f"duplicate client ids in {ids}")
    errs = [e for s in specs for e in s.validate()]
    if errs:
        raise DatasetSpecError("; ".join(errs))
    return [generate_client(s, master_seed) for s in specs]


def compute_stats(images: np.ndarray | ClientDataset) -> ChannelStats:
    """Per-channel mean and population std over every pixel; std floored at 1e-3."""
    if isinstance(images, ClientDataset):
        images = images.train_images
    x = np.asarray(images, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    if x.ndim == 3:
        x = x[None]
    axes = (0, 2, 3)
    return ChannelStats(mean=x.mean(axis=axes), std=np.maximum(x.std(axis=axes), STD_FLOOR))


def _check_pair(y: np.ndarray, y_hat: np.ndarray) -> None:
    if np.shape(y) != np.shape(y_hat):
        raise ValueError(f"mask shapes differ: {np.shape(y)} vs {np.shape(y_hat)}")


def dice(y: np.ndarray, y_hat_bin: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|); two empty masks score 1."""
    _check_pair(y, y_hat_bin)
    a = np.asarray(y) > 0.5
    b = np.asarray(y_hat_bin) > 0.5
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def pixel_accuracy(y: np.ndarray, y_hat_bin: np.ndarray) -> float:
    _check_pair(y, y_hat_bin)
    a = np.asarray(y) > 0.5
    b = np.asarray(y_hat_bin) > 0.5
    return float(np.mean(a == b))
