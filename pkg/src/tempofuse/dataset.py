"""Scan sequence ingestion, train/eval splitting and synthetic data.

Corpus layout on disk::

    <root>/manifest                      one class name per line, line 0 = background
    <root>/<sequence_id>/<index>.png     grayscale scan
    <root>/<sequence_id>/<index>_mask.png  8-bit label map
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

MANIFEST_NAME = "manifest"
_IMAGE_RE = re.compile(r"^(\d+)\.png$")


class CorpusError(ValueError):
    """Raised when a corpus on disk or in memory violates its layout contract."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScanFrame:
    index: int
    image: np.ndarray  # float32, [0, 1]
    mask: np.ndarray  # int64 label map

    def __post_init__(self):
        if self.index < 0:
            raise CorpusError(f"negative frame index {self.index}")
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise CorpusError(
                f"frame {self.index}: image {self.image.shape} and mask "
                f"{self.mask.shape} must be equal 2-D shapes")
        object.__setattr__(self, "image", _frozen(self.image.astype(np.float32, copy=False)))
        object.__setattr__(self, "mask", _frozen(self.mask.astype(np.int64, copy=False)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


@dataclass(frozen=True)
class ScanSequence:
    id: str
    frames: tuple[ScanFrame, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(self.class_names) < 2 or self.class_names[0] != "background":
            raise CorpusError(
                f"sequence {self.id!r}: class_names must start with 'background' "
                f"and name at least one suspicious class, got {self.class_names}")
        if not self.frames:
            raise CorpusError(f"sequence {self.id!r} has no frames")
        first = self.frames[0]
        for offset, frame in enumerate(self.frames):
            if frame.index != first.index + offset:
                raise CorpusError(
                    f"sequence {self.id!r}: frame indices must be consecutive, "
                    f"found {frame.index} at position {offset}")
            if frame.shape != first.shape:
                raise CorpusError(
                    f"sequence {self.id!r}: frame {frame.index} has shape "
                    f"{frame.shape}, expected {first.shape}")
            if frame.mask.min() < 0 or frame.mask.max() >= self.num_classes:
                raise CorpusError(
                    f"sequence {self.id!r}: frame {frame.index} mask values must be "
                    f"in [0, {self.num_classes - 1}]")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[ScanSequence, ...]
    eval: tuple[ScanSequence, ...]
    seed: int

    @property
    def train_fraction(self) -> float:
        n_train = sum(len(s) for s in self.train)
        return n_train / (n_train + sum(len(s) for s in self.eval))


# -- loading -----------------------------------------------------------------

def read_manifest(root: Path) -> list[str]:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise CorpusError(f"missing manifest file: {path}")
    names = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n]
    if len(names) < 2 or names[0] != "background":
        raise CorpusError(f"{path}: first line must be 'background' followed by class names")
    return names


def write_manifest(root: Path, class_names: Sequence[str]) -> None:
    Path(root, MANIFEST_NAME).write_text("\n".join(class_names) + "\n", encoding="utf-8")


def read_image(path: Path) -> np.ndarray:
    """Read a grayscale PNG scaled by its native bit depth into [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64)


def load_sequence_dir(seq_dir: Path, class_names: Sequence[str],
                      require_masks: bool = True) -> ScanSequence:
    """Load one sequence directory.

    With ``require_masks=False`` frames lacking a mask get an all-background
    mask, which is what inference on unlabeled scans needs.
    """
    seq_dir = Path(seq_dir)
    numbered = []
    for p in seq_dir.iterdir():
        m = _IMAGE_RE.match(p.name)
        if m:
            numbered.append((int(m.group(1)), p))
    if not numbered:
        raise CorpusError(f"sequence directory {seq_dir} contains no numbered images")
    numbered.sort()

    n = len(class_names)
    frames = []
    for index, img_path in numbered:
        mask_path = img_path.with_name(f"{img_path.stem}_mask.png")
        image = read_image(img_path)
        if mask_path.is_file():
            mask = read_mask(mask_path)
            if mask.shape != image.shape:
                raise CorpusError(f"{mask_path}: mask shape {mask.shape} != image shape {image.shape}")
            if mask.max() >= n:
                raise CorpusError(f"{mask_path}: mask value {int(mask.max())} >= number of classes {n}")
        elif require_masks:
            raise CorpusError(f"missing mask for image {img_path}")
        else:
            mask = np.zeros(image.shape, dtype=np.int64)
        if frames and image.shape != frames[0].shape:
            raise CorpusError(
                f"{img_path}: dimensions {image.shape} differ from {frames[0].shape} "
                f"in sequence {seq_dir.name}")
        frames.append(ScanFrame(index=index, image=image, mask=mask))
    return ScanSequence(id=seq_dir.name, frames=tuple(frames), class_names=tuple(class_names))


def has_masks(seq_dir: Path) -> bool:
    return any(Path(seq_dir).glob("*_mask.png"))


def load_corpus(root_path) -> list[ScanSequence]:
    root = Path(root_path)
    if not root.is_dir():
        raise CorpusError(f"corpus root does not exist: {root}")
    class_names = read_manifest(root)
    seq_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not seq_dirs:
        raise CorpusError(f"corpus root {root} contains no sequence directories")
    return [load_sequence_dir(d, class_names) for d in seq_dirs]


def save_sequence(seq: ScanSequence, root) -> Path:
    seq_dir = Path(root) / seq.id
    seq_dir.mkdir(parents=True, exist_ok=True)
    for frame in seq.frames:
        pixels = np.round(np.asarray(frame.image) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(seq_dir / f"{frame.index:03d}.png")
        Image.fromarray(frame.mask.astype(np.uint8), mode="L").save(
            seq_dir / f"{frame.index:03d}_mask.png")
    return seq_dir


def save_corpus(sequences: Sequence[ScanSequence], root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_manifest(root, sequences[0].class_names)
    for seq in sequences:
        save_sequence(seq, root)


# -- splitting ---------------------------------------------------------------

def split_corpus(sequences: Sequence[ScanSequence], train_fraction: float = 0.7,
                 seed: int = 0) -> DatasetSplit:
    """Partition sequences (never frames) into train and eval sides.

    Picks the subset of sequences whose frame total is closest to
    ``train_fraction`` of all frames, keeping both sides non-empty. Ties
    between equally close subsets are broken by a seeded shuffle.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(sequences) < 2:
        raise ValueError("split_corpus needs at least two sequences")

    rng = np.random.default_rng(seed)
    order = [int(i) for i in rng.permutation(len(sequences))]
    lengths = [len(sequences[i]) for i in order]
    total = sum(lengths)
    target = train_fraction * total

    # Subset-sum over frame counts: parent[s] = (previous sum, position) for the
    # first way sum s was reached in shuffled order.
    parent: dict[int, tuple[int, int] | None] = {0: None}
    for pos, length in enumerate(lengths):
        for s in sorted(parent, reverse=True):
            if s + length not in parent:
                parent[s + length] = (s, pos)
    candidates = [s for s in parent if 0 < s < total]
    best = min(candidates, key=lambda s: (abs(s - target), s))

    chosen = set()
    s = best
    while parent[s] is not None:
        prev, pos = parent[s]
        chosen.add(order[pos])
        s = prev

    train = tuple(sequences[i] for i in range(len(sequences)) if i in chosen)
    held = tuple(sequences[i] for i in range(len(sequences)) if i not in chosen)
    return DatasetSplit(train=train, eval=held, seed=seed)


# -- synthetic data ----------------------------------------------------------

SHAPE_KINDS = ("rectangle", "ellipse", "triangle", "cross")


@dataclass(frozen=True)
class Shape:
    """One object footprint; ``center`` and ``size`` are in pixels."""
    class_id: int
    kind: str
    center: tuple[float, float]
    size: tuple[float, float]
    transmission: float = 0.5

    def footprint(self, shape: tuple[int, int]) -> np.ndarray:
        rows, cols = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
        dr = (rows - self.center[0]) / self.size[0]
        dc = (cols - self.center[1]) / self.size[1]
        if self.kind == "rectangle":
            return (np.abs(dr) <= 1) & (np.abs(dc) <= 1)
        if self.kind == "ellipse":
            return dr ** 2 + dc ** 2 <= 1
        if self.kind == "triangle":
            # apex up, base at dr = 1
            return (dr <= 1) & (dr >= -1) & (np.abs(dc) <= (dr + 1) / 2)
        if self.kind == "cross":
            return ((np.abs(dr) <= 1) & (np.abs(dc) <= 0.35)) | \
                   ((np.abs(dc) <= 1) & (np.abs(dr) <= 0.35))
        raise ValueError(f"unknown shape kind {self.kind!r}")


def render_frame(background: np.ndarray, shapes: Sequence[Shape]) -> tuple[np.ndarray, np.ndarray]:
    """Attenuate ``background`` by each shape and build the label map.

    Shapes are drawn in ascending class id, so where footprints overlap the
    higher class id owns the pixel. Attenuation is multiplicative.
    """
    image = np.array(background, dtype=np.float64)
    mask = np.zeros(background.shape, dtype=np.int64)
    for shp in sorted(shapes, key=lambda s: s.class_id):
        fp = shp.footprint(background.shape)
        image[fp] *= shp.transmission
        mask[fp] = shp.class_id
    return image, mask


def _class_transmission(class_id: int, n_classes: int) -> float:
    # denser classes absorb more; spread over [0.15, 0.7]
    if n_classes <= 2:
        return 0.45
    return 0.7 - 0.55 * (class_id - 1) / (n_classes - 2)


def generate_synthetic(num_sequences: int, frames_per_sequence: int,
                       dims: tuple[int, int] = (64, 64), n_classes: int = 5,
                       seed: int = 0) -> list[ScanSequence]:
    """Synthetic bags: one or two drifting shapes per suspicious class over a textured background."""
    if num_sequences < 1 or frames_per_sequence < 1:
        raise ValueError("num_sequences and frames_per_sequence must be >= 1")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    n1, n2 = int(dims[0]), int(dims[1])
    if n1 < 16 or n2 < 16:
        raise ValueError(f"dims must be at least 16x16, got {n1}x{n2}")

    class_names = ("background",) + tuple(f"class{c}" for c in range(1, n_classes))
    rng = np.random.default_rng(seed)
    sequences = []
    for s in range(num_sequences):
        texture = gaussian_filter(rng.standard_normal((n1, n2)), sigma=max(n1, n2) / 16)
        texture /= np.abs(texture).max() + 1e-12
        background = 0.85 + 0.06 * texture

        tracks = []
        placed: list[tuple[np.ndarray, float]] = []
        for c in range(1, n_classes):
            for instance in range(int(rng.integers(2, 4))):
                kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
                half = rng.uniform(0.05, 0.09, size=2) * (n1, n2)
                radius = float(half.max()) + 0.25 * frames_per_sequence
                free = False
                for _attempt in range(50):
                    center = rng.uniform(half + 1, (n1, n2) - half - 1)
                    free = all(np.hypot(*(center - pc)) > radius + pr for pc, pr in placed)
                    if free:
                        break
                # the first instance of a class is kept even when it must overlap
                if not free and instance > 0:
                    continue
                placed.append((center, radius))
                velocity = rng.uniform(-0.5, 0.5, size=2)
                tracks.append((c, kind, center, half, velocity))

        frames = []
        for f in range(frames_per_sequence):
            shapes = [
                Shape(class_id=c, kind=kind,
                      center=tuple(np.clip(center + f * vel, half, (n1 - 1, n2 - 1) - half)),
                      size=tuple(half),
                      transmission=_class_transmission(c, n_classes))
                for c, kind, center, half, vel in tracks
            ]
            image, mask = render_frame(background, shapes)
            image = image + rng.normal(0.0, 0.02, size=image.shape)
            image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
            frames.append(ScanFrame(index=f, image=image.astype(np.float32), mask=mask))
        sequences.append(ScanSequence(id=f"seq{s:03d}", frames=tuple(frames),
                                      class_names=class_names))
    return sequences
