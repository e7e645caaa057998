"""Episode sampling for K-way N-shot Q-query tasks.

An episode holds K*(N+Q) images: the first N*K positions are the support
block (ordered class-major: class c occupies positions c*N .. (c+1)*N-1),
the remaining K*Q positions are the query block.  Downstream relation
matrices index images in exactly this order, so the convention is part of
the contract, not an implementation detail.

Two sources are provided: directories laid out as one folder per class
(``class_folders``), and a synthetic generator whose classes are defined
purely by dominant color, for experiments that isolate color perception.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, IngestionError, SamplingError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}
DEFAULT_IMAGE_SIZE = (84, 84)


@dataclass(frozen=True)
class EpisodeSpec:
    """Shape of one episode: K ways, N shots, Q queries per class."""

    ways: int = 5
    shots: int = 1
    queries: int = 15
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    seed: int = 0

    def __post_init__(self):
        if self.ways < 2:
            raise ConfigurationError(f"ways must be >= 2, got {self.ways}")
        if self.shots < 1:
            raise ConfigurationError(f"shots must be >= 1, got {self.shots}")
        if self.queries < 1:
            raise ConfigurationError(f"queries must be >= 1, got {self.queries}")
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ConfigurationError(f"image_size must be positive, got {self.image_size}")

    @property
    def support_size(self) -> int:
        return self.ways * self.shots

    @property
    def query_size(self) -> int:
        return self.ways * self.queries

    @property
    def total(self) -> int:
        """Episode size T = K * (N + Q)."""
        return self.ways * (self.shots + self.queries)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass(frozen=True)
class Episode:
    """One sampled task.

    ``support_images`` has shape (N*K, H, W, 3) uint8 and ``query_images``
    (Q*K, H, W, 3) uint8; labels are class indices in [0, K).
    """

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray

    @property
    def all_images(self) -> np.ndarray:
        """Support block followed by query block, shape (T, H, W, 3)."""
        return np.concatenate([self.support_images, self.query_images], axis=0)


class Dataset:
    """Read-only handle over a class_folders directory.

    Images are decoded lazily; the constructor only takes a census of the
    directory so errors about empty classes surface immediately.
    """

    def __init__(self, root: Path, class_names: list[str], files: dict[str, list[Path]],
                 image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE):
        self.root = root
        self.class_names = class_names
        self._files = files
        self.image_size = image_size

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> dict[str, int]:
        return {name: len(self._files[name]) for name in self.class_names}

    def load_image(self, class_name: str, index: int) -> np.ndarray:
        """Decode one image to (H, W, 3) uint8 at the configured size."""
        path = self._files[class_name][index]
        try:
            with Image.open(path) as img:
                img = img.convert("RGB")
                h, w = self.image_size
                if img.size != (w, h):
                    img = img.resize((w, h), Image.BILINEAR)
                return np.asarray(img, dtype=np.uint8)
        except (UnidentifiedImageError, OSError) as exc:
            raise IngestionError(f"cannot decode image file {path}") from exc


def load_dataset(path, layout: str = "class_folders",
                 image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE) -> Dataset:
    """Build a Dataset handle from a directory with one folder per class."""
    if layout != "class_folders":
        raise ConfigurationError(f"unknown dataset layout: {layout!r}")
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"dataset path does not exist or is not a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"dataset directory has no class folders: {root}")
    files: dict[str, list[Path]] = {}
    for class_dir in class_dirs:
        images = sorted(
            p for p in class_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not images:
            raise IngestionError(f"class folder contains no images: {class_dir}")
        files[class_dir.name] = images
    return Dataset(root, [p.name for p in class_dirs], files, image_size)


def sample_episode(dataset: Dataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw one episode uniformly: K classes, then N+Q distinct images each."""
    if dataset.num_classes < spec.ways:
        raise SamplingError(
            f"dataset has {dataset.num_classes} classes, episode needs {spec.ways}"
        )
    counts = dataset.class_counts()
    needed = spec.shots + spec.queries
    class_idx = rng.choice(dataset.num_classes, size=spec.ways, replace=False)
    support, query = [], []
    for label, ci in enumerate(class_idx):
        name = dataset.class_names[ci]
        if counts[name] < needed:
            raise SamplingError(
                f"class {name!r} has {counts[name]} images, episode needs {needed}"
            )
        picks = rng.choice(counts[name], size=needed, replace=False)
        for j in picks[: spec.shots]:
            support.append(dataset.load_image(name, int(j)))
        for j in picks[spec.shots:]:
            query.append(dataset.load_image(name, int(j)))
    return _assemble(spec, support, query)


def _assemble(spec: EpisodeSpec, support: list[np.ndarray], query: list[np.ndarray]) -> Episode:
    support_labels = np.repeat(np.arange(spec.ways), spec.shots)
    query_labels = np.repeat(np.arange(spec.ways), spec.queries)
    return Episode(
        support_images=np.stack(support).astype(np.uint8),
        support_labels=support_labels,
        query_images=np.stack(query).astype(np.uint8),
        query_labels=query_labels,
    )


def sample_palette(ways: int, separation: float, rng: np.random.Generator,
                   max_rounds: int = 1000) -> np.ndarray:
    """Pick `ways` colors in [0,1]^3 with pairwise Euclidean distance >= separation.

    Rejection sampling; when the requested separation is too tight for
    random draws, falls back to the cube corners (which are pairwise at
    distance >= 1).
    """
    if not 0.0 < separation <= 1.0:
        raise ConfigurationError(f"palette separation must be in (0, 1], got {separation}")
    for _ in range(max_rounds):
        colors = rng.uniform(0.0, 1.0, size=(ways, 3))
        diff = colors[:, None, :] - colors[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= separation:
            return colors
    corners = np.array(
        [[i, j, k] for i in (0.0, 1.0) for j in (0.0, 1.0) for k in (0.0, 1.0)]
    )
    if ways <= len(corners):
        return corners[rng.permutation(len(corners))[:ways]]
    raise SamplingError(
        f"cannot place {ways} palette colors with separation {separation}"
    )


def synth_episode(spec: EpisodeSpec, palette_separation: float = 0.3,
                  noise: float = 0.1, rng: np.random.Generator | None = None,
                  palette: np.ndarray | None = None) -> Episode:
    """Generate an episode whose classes differ only by dominant color.

    Each image is a plane of its class palette color plus i.i.d. Gaussian
    pixel noise of standard deviation ``noise`` (in normalized RGB), so at
    noise=0 every class is a constant-color image.  A fresh palette is
    drawn per episode unless one is passed in.
    """
    if noise < 0.0:
        raise ConfigurationError(f"noise must be >= 0, got {noise}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if palette is None:
        palette = sample_palette(spec.ways, palette_separation, rng)
    h, w = spec.image_size

    def make(label: int) -> np.ndarray:
        base = np.broadcast_to(palette[label], (h, w, 3)).astype(np.float64)
        if noise > 0.0:
            base = base + rng.normal(0.0, noise, size=(h, w, 3))
        return np.clip(np.rint(base * 255.0), 0, 255).astype(np.uint8)

    support = [make(c) for c in range(spec.ways) for _ in range(spec.shots)]
    query = [make(c) for c in range(spec.ways) for _ in range(spec.queries)]
    return _assemble(spec, support, query)


class EpisodeSource:
    """Stream of episodes drawn from one underlying source.

    Wraps either a Dataset or the synthetic generator behind a single
    ``sample(spec, rng)`` call so the training and evaluation loops do not
    care where episodes come from.
    """

    def sample(self, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
        raise NotImplementedError


class DatasetSource(EpisodeSource):
    def __init__(self, dataset: Dataset):
        self.dataset = dataset

    def sample(self, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
        return sample_episode(self.dataset, spec, rng)


class SyntheticSource(EpisodeSource):
    def __init__(self, palette_separation: float = 0.3, noise: float = 0.1):
        self.palette_separation = palette_separation
        self.noise = noise

    def sample(self, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
        return synth_episode(spec, self.palette_separation, self.noise, rng)
