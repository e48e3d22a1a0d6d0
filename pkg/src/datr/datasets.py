"""Dataset layout I/O, synthetic multi-domain data and the mixed-domain sampler.

On-disk layout::

    root/<domain>/domain.cfg            key=value: name, num_landmarks,
                                        spacing_rule, sdr_thresholds, id_threshold
    root/<domain>/<split>/imgNNN.png    8/16-bit grayscale (PGM also read)
    root/<domain>/<split>/imgNNN.csv    "n,row,col" lines, n = 1..N
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .layers import resize_bilinear
from .model import DomainSpec, LandmarkSet, rescale_coords
from .numerics import Tensor

__all__ = [
    "Sample", "DatasetManifest", "DataError", "SPLITS", "PAPER_DOMAINS", "PAPER_SPLITS",
    "read_domain_cfg", "write_domain_cfg", "read_image", "write_image", "read_labels",
    "write_labels", "load_dataset", "load_root", "save_dataset", "gen_synthetic",
    "synthetic_spec", "mixed_sampler", "prepare_split",
]

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".pgm")

PAPER_DOMAINS = {
    "head": DomainSpec("head", 19, "fixed:0.1", (2.0, 2.5, 3.0, 4.0), 2.0),
    "hand": DomainSpec("hand", 37, "wrist:1,5", (2.0, 4.0, 10.0), 2.0),
    "chest": DomainSpec("chest", 6, "pixel", (3.0, 6.0, 9.0), 20.0),
}
# (train, test) image counts of the reference datasets
PAPER_SPLITS = {"head": (150, 250), "hand": (609, 300), "chest": (229, 50)}


class DataError(ValueError):
    """A dataset file is missing, malformed or inconsistent with its domain."""


@dataclass
class Sample:
    image: np.ndarray  # [H, W] or [H, W, C], values in [0, 1]
    landmarks: LandmarkSet
    domain: str
    path: str = ""


@dataclass
class DatasetManifest:
    spec: DomainSpec
    splits: dict[str, list[Sample]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    metadata: dict[str, object] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.spec.name

    def __getitem__(self, split: str) -> list[Sample]:
        return self.splits.get(split, [])

    def counts(self) -> dict[str, int]:
        return {s: len(v) for s, v in self.splits.items()}


# ---------------------------------------------------------------- file formats

def _format_float(v: float) -> str:
    return repr(float(v))


def write_domain_cfg(spec: DomainSpec, path: Path) -> None:
    lines = [
        f"name={spec.name}",
        f"num_landmarks={spec.num_landmarks}",
        f"spacing_rule={spec.spacing}",
        "sdr_thresholds=" + ",".join(f"{t:g}" for t in spec.sdr_thresholds),
        f"id_threshold={spec.id_threshold:g}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_domain_cfg(path: Path) -> DomainSpec:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: domain.cfg not found")
    kv = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{n}: expected key=value")
        kv[key.strip()] = value.strip()
    try:
        return DomainSpec(
            name=kv["name"],
            num_landmarks=int(kv["num_landmarks"]),
            spacing=kv.get("spacing_rule", "pixel"),
            sdr_thresholds=tuple(float(t) for t in kv["sdr_thresholds"].split(",")),
            id_threshold=float(kv["id_threshold"]),
        )
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc.args[0]}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def read_image(path: Path) -> np.ndarray:
    """Grayscale image as float64 in [0, 1], shape ``[H, W]``."""
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from None
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1) if arr.dtype == np.uint8 else arr[..., 0]
        return np.clip(arr / 255.0, 0, 1)
    if arr.dtype == np.uint8:
        return arr / 255.0
    if arr.dtype in (np.uint16, np.int32) or arr.max() > 255:
        return np.clip(arr / 65535.0, 0, 1)
    return arr.astype(np.float64) / 255.0


def write_image(image: np.ndarray, path: Path, bits: int = 8) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    if bits == 8:
        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)
    elif bits == 16:
        Image.fromarray(np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def read_labels(path: Path, num_landmarks: int, height: int, width: int) -> LandmarkSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: label file not found")
    rows = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            n, r, c = line.split(",")
            rows[int(n)] = (float(r), float(c))
        except ValueError:
            raise DataError(f"{path}:{lineno}: expected 'n,row,col'") from None
    if sorted(rows) != list(range(1, num_landmarks + 1)):
        raise DataError(f"{path}: expected landmarks 1..{num_landmarks}, found {len(rows)} rows")
    coords = np.array([rows[n] for n in range(1, num_landmarks + 1)])
    try:
        return LandmarkSet(coords, height, width)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_labels(landmarks: LandmarkSet, path: Path) -> None:
    lines = [f"{n},{_format_float(r)},{_format_float(c)}" for n, (r, c) in enumerate(landmarks.coords, 1)]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(root_path, spec: DomainSpec | None = None, name: str | None = None) -> DatasetManifest:
    """Load ``root/<name>`` where ``name`` defaults to ``spec.name``."""
    root = Path(root_path)
    dname = name or (spec.name if spec else None)
    ddir = root / dname if dname else root
    if not ddir.is_dir():
        raise DataError(f"{ddir}: domain directory not found")
    if spec is None:
        spec = read_domain_cfg(ddir / "domain.cfg")
    manifest = DatasetManifest(spec)
    for split in SPLITS:
        sdir = ddir / split
        if not sdir.is_dir():
            continue
        for img_path in sorted(p for p in sdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            image = read_image(img_path)
            labels = read_labels(img_path.with_suffix(".csv"), spec.num_landmarks, *image.shape[:2])
            manifest.splits[split].append(Sample(image, labels, spec.name, str(img_path)))
        orphans = [p for p in sdir.glob("*.csv")
                   if not any(p.with_suffix(s).exists() for s in IMAGE_SUFFIXES)]
        if orphans:
            raise DataError(f"{orphans[0]}: label without a matching image")
    if not any(manifest.splits.values()):
        raise DataError(f"{ddir}: dataset is empty")
    return manifest


def load_root(root_path) -> list[DatasetManifest]:
    root = Path(root_path)
    dirs = sorted(p for p in root.iterdir() if (p / "domain.cfg").is_file()) if root.is_dir() else []
    if not dirs:
        raise DataError(f"{root}: no domain directories (with domain.cfg) found")
    return [load_dataset(root, name=d.name) for d in dirs]


def save_dataset(manifest: DatasetManifest, root_path, bits: int = 8) -> Path:
    ddir = Path(root_path) / manifest.name
    ddir.mkdir(parents=True, exist_ok=True)
    write_domain_cfg(manifest.spec, ddir / "domain.cfg")
    for split, samples in manifest.splits.items():
        if not samples:
            continue
        sdir = ddir / split
        sdir.mkdir(exist_ok=True)
        for k, s in enumerate(samples):
            stem = Path(s.path).stem if s.path else f"img{k:03d}"
            write_image(s.image, sdir / f"{stem}.png", bits)
            write_labels(s.landmarks, sdir / f"{stem}.csv")
    return ddir


# ---------------------------------------------------------------- synthetic data

def _smoothstep(edge: float, d: np.ndarray) -> np.ndarray:
    """1 inside ``d < edge``, 0 outside, with a one-pixel soft rim."""
    return np.clip(edge + 0.5 - d, 0.0, 1.0)


def _motif(kind: int, dr: np.ndarray, dc: np.ndarray) -> np.ndarray:
    """Intensity of motif ``kind`` at offsets from its centre."""
    r = np.hypot(dr, dc)
    kind %= 8
    if kind == 0:  # plus
        return np.maximum(_smoothstep(1.0, np.abs(dr)) * _smoothstep(5.0, np.abs(dc)),
                          _smoothstep(1.0, np.abs(dc)) * _smoothstep(5.0, np.abs(dr)))
    if kind == 1:  # ring
        return _smoothstep(1.0, np.abs(r - 4.0))
    if kind == 2:  # disk
        return _smoothstep(3.5, r)
    if kind == 3:  # diagonal cross
        u, v = (dr + dc) / np.sqrt(2), (dr - dc) / np.sqrt(2)
        return np.maximum(_smoothstep(1.0, np.abs(u)) * _smoothstep(5.0, np.abs(v)),
                          _smoothstep(1.0, np.abs(v)) * _smoothstep(5.0, np.abs(u)))
    if kind == 4:  # square outline
        cheb = np.maximum(np.abs(dr), np.abs(dc))
        return _smoothstep(0.8, np.abs(cheb - 4.0))
    if kind == 5:  # horizontal bar with centre dot
        return np.maximum(_smoothstep(1.0, np.abs(dr)) * _smoothstep(6.0, np.abs(dc)), _smoothstep(2.0, r))
    if kind == 6:  # vertical bar pair
        return _smoothstep(0.8, np.abs(np.abs(dc) - 2.5)) * _smoothstep(5.0, np.abs(dr))
    # triangle-ish wedge
    return _smoothstep(0.8, np.abs(dr - 0.5 * np.abs(dc) + 1.0)) * _smoothstep(4.5, np.abs(dc)) \
        + _smoothstep(1.5, r) * 0.5


def synthetic_spec(name: str, num_landmarks: int) -> DomainSpec:
    return DomainSpec(name, num_landmarks, "pixel", (3.0, 6.0, 9.0), 20.0)


def _template(rng: np.random.Generator, n: int, size: int, margin: int, min_dist: float) -> np.ndarray:
    for _ in range(1000):
        pts = rng.integers(margin, size - margin, size=(n, 2))
        d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
        if n == 1 or d[np.triu_indices(n, 1)].min() >= min_dist:
            return pts
    raise ValueError("could not place landmarks; image too small for the landmark count")


def gen_synthetic(spec: DomainSpec, count: int, seed: int, size: int = 64,
                  val_fraction: float = 0.2, test_count: int = 0, motif_offset: int = 0,
                  shift: int = 4, jitter: int = 2) -> DatasetManifest:
    """Render ``count`` train/val images plus ``test_count`` test images.

    Like real anatomy, each domain has a layout: a template position per
    landmark, drawn once per call, which every image moves by a global
    integer shift (up to ``shift`` px) plus per-landmark jitter (up to
    ``jitter`` px). Landmark ``n`` is drawn as motif ``n + motif_offset``; its
    label is the motif centre. Images are quantised to 8 bits so saving and
    reloading reproduces them exactly.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    margin = 6
    inner = margin + shift + jitter
    min_dist = 12.0 + 2 * jitter
    template = _template(rng, spec.num_landmarks, size, inner, min_dist)
    n_val = int(round(count * val_fraction)) if count > 1 else 0
    manifest = DatasetManifest(spec, metadata={"seed": seed, "size": size, "synthetic": True})
    for k in range(count + test_count):
        offset = rng.integers(-shift, shift + 1, size=2)
        pts = (template + offset + rng.integers(-jitter, jitter + 1, size=template.shape)).astype(np.float64)
        bg_level = rng.uniform(0.05, 0.25)
        grad = rng.uniform(-0.1, 0.1, size=2)
        image = bg_level + grad[0] * (rr / size - 0.5) + grad[1] * (cc / size - 0.5)
        image = image + rng.normal(0.0, 0.04, size=(size, size))
        for n, (r, c) in enumerate(pts):
            amp = rng.uniform(0.6, 0.9)
            image = image + amp * _motif(n + motif_offset, rr - r, cc - c)
        image = np.round(np.clip(image, 0.0, 1.0) * 255) / 255
        if k < count - n_val:
            split = "train"
        elif k < count:
            split = "val"
        else:
            split = "test"
        sample = Sample(image, LandmarkSet(pts, size, size), spec.name, f"img{k:03d}")
        manifest.splits[split].append(sample)
    return manifest


# ---------------------------------------------------------------- batching

def prepare_split(samples: Sequence[Sample], input_size: int) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Resize images to the model input and map labels with the centre rule.

    Returns ``(images [n, S, S, C], coords [n, N, 2], original geometries)``.
    """
    images, coords, geoms = [], [], []
    for s in samples:
        img = s.image if s.image.ndim == 3 else s.image[..., None]
        H, W = img.shape[:2]
        if (H, W) != (input_size, input_size):
            img = resize_bilinear(Tensor(img[None], dtype=np.float64), input_size, input_size).data[0]
        images.append(img)
        coords.append(rescale_coords(s.landmarks.coords, (H, W), (input_size, input_size)))
        geoms.append((H, W))
    if not images:
        return np.zeros((0, input_size, input_size, 1)), np.zeros((0, 0, 2)), []
    return np.stack(images), np.stack(coords), geoms


def mixed_sampler(manifests: Sequence[DatasetManifest], batch_size: int, seed,
                  split: str = "train", uniform: bool = False) -> Iterator[tuple[str, list[int]]]:
    """One epoch of single-domain batches as ``(domain, sample indices)``.

    Each domain's samples are shuffled and cut into batches; the next domain
    is drawn with probability proportional to its remaining batches (or
    uniformly over domains with batches left when ``uniform``). A final
    batch of one sample is dropped because batch norm needs two.
    """
    if not manifests:
        raise ValueError("mixed_sampler needs at least one manifest")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    queues: dict[str, list[list[int]]] = {}
    for m in manifests:
        order = rng.permutation(len(m[split]))
        batches = [order[i:i + batch_size].tolist() for i in range(0, len(order), batch_size)]
        if batch_size > 1 and batches and len(batches[-1]) == 1 and len(order) > 1:
            batches.pop()
        queues[m.name] = batches
    names = [m.name for m in manifests]
    while True:
        left = np.array([len(queues[n]) for n in names], dtype=np.float64)
        if left.sum() == 0:
            return
        weights = (left > 0).astype(np.float64) if uniform else left
        pick = names[rng.choice(len(names), p=weights / weights.sum())]
        yield pick, queues[pick].pop(0)
