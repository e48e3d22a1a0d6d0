"""Full model assembly, Gaussian targets, and landmark decoding."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .decoder import DEFAULT_DILATIONS, Decoder, Guidance
from .encoder import Encoder, EncoderConfig
from .layers import resize_bilinear
from .numerics import ContractError, Tensor, as_tensor, mul
from .params import ParamStore, UnknownDomainError, domain_name

__all__ = [
    "DomainSpec", "LandmarkSet", "HeatmapStack", "ModelConfig", "DATR",
    "gaussian_target", "gaussian_targets", "decode_landmarks", "decode_batch",
    "rescale_coords", "resize_heatmap", "PRESETS",
]

HEATMAP_ROLES = ("guidance", "fine", "fused", "target")


@dataclass(frozen=True)
class DomainSpec:
    """Identity and metric rules for one anatomy.

    ``spacing`` is one of ``"fixed:<mm_per_px>"``, ``"wrist:<idxA>,<idxB>"``
    (1-based landmark indices of the wrist endpoints) or ``"pixel"``.
    """

    name: str
    num_landmarks: int
    spacing: str = "pixel"
    sdr_thresholds: tuple[float, ...] = (3.0, 6.0, 9.0)
    id_threshold: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "sdr_thresholds", tuple(float(t) for t in self.sdr_thresholds))
        if self.num_landmarks < 1:
            raise ContractError(f"{self.name}: num_landmarks must be >= 1")
        th = self.sdr_thresholds
        if not th or th[0] <= 0 or any(b <= a for a, b in zip(th, th[1:])):
            raise ContractError(f"{self.name}: thresholds must be positive and strictly increasing, got {th}")
        if self.id_threshold <= 0:
            raise ContractError(f"{self.name}: id_threshold must be positive")
        self.spacing_rule()

    def spacing_rule(self) -> tuple[str, object]:
        kind, _, arg = self.spacing.partition(":")
        if kind == "pixel" and not arg:
            return "pixel", None
        if kind == "fixed":
            mm = float(arg)
            if mm <= 0:
                raise ContractError(f"{self.name}: fixed spacing must be positive")
            return "fixed", mm
        if kind == "wrist":
            a, b = (int(v) for v in arg.split(","))
            if not (1 <= a <= self.num_landmarks and 1 <= b <= self.num_landmarks) or a == b:
                raise ContractError(f"{self.name}: bad wrist endpoint indices {a},{b}")
            return "wrist", (a, b)
        raise ContractError(f"{self.name}: unknown spacing rule {self.spacing!r}")

    @property
    def unit(self) -> str:
        return "px" if self.spacing_rule()[0] == "pixel" else "mm"


@dataclass
class LandmarkSet:
    """Ordered ``(row, col)`` landmark coordinates in a stated image geometry.

    Pixel ``i`` covers ``[i - 0.5, i + 0.5)``, so valid coordinates lie in
    ``[-0.5, H - 0.5)`` by ``[-0.5, W - 0.5)``.
    """

    coords: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if self.height < 1 or self.width < 1:
            raise ContractError("geometry must be positive")
        bad = ~self.in_bounds()
        if bad.any():
            n = int(np.flatnonzero(bad)[0])
            raise ContractError(
                f"landmark {n + 1} at {tuple(self.coords[n])} is outside {self.height}x{self.width}")

    def in_bounds(self) -> np.ndarray:
        r, c = self.coords[:, 0], self.coords[:, 1]
        return (r >= -0.5) & (r < self.height - 0.5) & (c >= -0.5) & (c < self.width - 0.5)

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class HeatmapStack:
    data: np.ndarray  # [H, W, N]
    role: str = "fused"

    def __post_init__(self):
        if self.role not in HEATMAP_ROLES:
            raise ValueError(f"unknown heatmap role {self.role!r}")
        if self.data.ndim != 3:
            raise ContractError(f"heatmap stack must be [H, W, N], got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


def gaussian_targets(coords: np.ndarray, height: int, width: int, sigma: float,
                     normalize_peak: bool = False, dtype=np.float64) -> np.ndarray:
    """Vectorised Gaussian heatmaps for coordinates of shape ``[..., N, 2]``.

    Returns ``[..., H, W, N]`` holding
    ``exp(-((i - r)^2 + (j - c)^2) / (2 sigma^2)) / (sqrt(2 pi) sigma)``;
    the amplitude factor is dropped when ``normalize_peak`` is set.
    """
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    coords = np.asarray(coords, dtype=np.float64)
    r = coords[..., 0][..., None, None, :]
    c = coords[..., 1][..., None, None, :]
    i = np.arange(height, dtype=np.float64)[:, None, None]
    j = np.arange(width, dtype=np.float64)[None, :, None]
    out = np.exp(-((i - r) ** 2 + (j - c) ** 2) / (2 * sigma * sigma))
    if not normalize_peak:
        out = out / (np.sqrt(2 * np.pi) * sigma)
    return out.astype(dtype, copy=False)


def gaussian_target(landmarks: LandmarkSet, shape: tuple[int, int], sigma: float,
                    normalize_peak: bool = False) -> HeatmapStack:
    H, W = shape
    r, c = landmarks.coords[:, 0], landmarks.coords[:, 1]
    if ((r < -0.5) | (r >= H - 0.5) | (c < -0.5) | (c >= W - 0.5)).any():
        raise ContractError(f"landmarks fall outside the {H}x{W} target grid")
    return HeatmapStack(gaussian_targets(landmarks.coords, H, W, sigma, normalize_peak), "target")


def decode_batch(heatmaps: np.ndarray) -> np.ndarray:
    """Per-channel argmax of ``[..., H, W, N]`` maps as ``[..., N, 2]`` (row, col).

    Ties go to the smallest row, then the smallest column.
    """
    hm = np.asarray(heatmaps)
    *lead, H, W, N = hm.shape
    flat = np.moveaxis(hm, -1, -3).reshape(*lead, N, H * W)
    idx = np.argmax(flat, axis=-1)
    return np.stack([idx // W, idx % W], axis=-1).astype(np.float64)


def decode_landmarks(heatmap: HeatmapStack | np.ndarray) -> LandmarkSet:
    data = heatmap.data if isinstance(heatmap, HeatmapStack) else np.asarray(heatmap)
    if data.size == 0:
        raise ContractError("cannot decode an empty heatmap")
    H, W, _ = data.shape
    return LandmarkSet(decode_batch(data), H, W)


def rescale_coords(coords, from_geometry: tuple[int, int], to_geometry: tuple[int, int]) -> np.ndarray:
    """Map pixel-centre coordinates between image geometries."""
    (hf, wf), (ht, wt) = from_geometry, to_geometry
    if min(hf, wf, ht, wt) <= 0:
        raise ContractError("geometries must be positive")
    c = np.asarray(coords, dtype=np.float64)
    scale = np.array([ht / hf, wt / wf])
    return (c + 0.5) * scale - 0.5


def resize_heatmap(heatmap: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resize an ``[H, W, N]`` map (the literal resize-back path)."""
    t = resize_bilinear(Tensor(heatmap[None], dtype=np.float64), height, width)
    return t.data[0]


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    input_size: int = 64
    guidance_width: int = 16
    dilations: tuple[int, ...] = DEFAULT_DILATIONS
    use_guidance: bool = True

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.input_size % self.encoder.size_divisor:
            raise ContractError(
                f"input size {self.input_size} must be divisible by {self.encoder.size_divisor}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "toy": lambda: ModelConfig(),
    "paper": lambda: ModelConfig(
        encoder=EncoderConfig(embed_dim=128, depths=(2, 2, 18, 2), heads=(4, 8, 16, 32), window=8),
        input_size=512, guidance_width=64),
}


class DATR:
    """Transformer encoder, DAC decoder and guidance network over shared/per-domain parameters."""

    def __init__(self, config: ModelConfig | None = None, domains=(), seed: int = 0):
        self.config = config or ModelConfig()
        self.seed = seed
        self.store = ParamStore()
        enc = self.config.encoder
        self.encoder = Encoder(self.store, enc)
        self.decoder = Decoder(self.store, enc)
        self.guidance = Guidance(self.store, enc.in_channels, self.config.guidance_width,
                                 self.config.dilations) if self.config.use_guidance else None
        rng = np.random.default_rng([seed, 0])
        self.encoder.init_shared(rng)
        self.decoder.init_shared(rng)
        self.domains: dict[str, int] = {}
        for d in domains:
            if isinstance(d, DomainSpec):
                self.register_domain(d.name, d.num_landmarks)
            else:
                name, n = d
                self.register_domain(name, n)

    @property
    def params(self) -> ParamStore:
        return self.store

    def domain_param_shapes(self, num_landmarks: int) -> dict[str, tuple[int, ...]]:
        shapes = self.encoder.domain_param_shapes()
        shapes.update(self.decoder.domain_param_shapes(num_landmarks))
        if self.guidance is not None:
            shapes.update(self.guidance.domain_param_shapes(num_landmarks))
        return shapes

    def register_domain(self, name: str, num_landmarks: int, donor: str | None = None) -> None:
        """Add a domain's parameters.

        Query projections come from one fixed draw so every domain starts with
        the same attention; other per-domain weights get fresh draws. With a
        ``donor``, every same-shaped tensor is copied from that domain instead.
        """
        if "/" in name or not name:
            raise ValueError(f"invalid domain name {name!r}")
        if name in self.domains:
            raise ValueError(f"domain {name!r} is already registered")
        if donor is not None and donor not in self.domains:
            raise UnknownDomainError(f"donor domain {donor!r} is not registered")
        index = len(self.domains)
        self.encoder.init_domain(name, np.random.default_rng([self.seed, 1]))
        rng = np.random.default_rng([self.seed, 2, index])
        self.decoder.init_domain(name, num_landmarks, rng)
        if self.guidance is not None:
            self.guidance.init_domain(name, num_landmarks, rng)
        self.domains[name] = num_landmarks
        if donor is not None:
            for suffix in self.domain_param_shapes(num_landmarks):
                src = self.store[domain_name(donor, suffix)]
                dst = self.store[domain_name(name, suffix)]
                if src.shape == dst.shape:
                    dst.data = src.data.copy()

    def check_domain(self, domain: str) -> None:
        if domain not in self.domains:
            raise UnknownDomainError(f"domain {domain!r} is not registered (known: {sorted(self.domains)})")

    def forward(self, image, domain: str, mode: str = "train"):
        """Return ``(fused, fine, guidance)`` heatmaps, each ``[B, H, W, N]``.

        ``guidance`` is ``None`` when the model has no guidance network, in
        which case ``fused`` is the fine heatmap.
        """
        self.check_domain(domain)
        image = as_tensor(image)
        if image.ndim == 3:
            image = image.reshape(1, *image.shape)
        pyramid = self.encoder(image, domain)
        fine = self.decoder(pyramid, domain, mode)
        if self.guidance is None:
            return fine, fine, None
        guide = self.guidance(image, domain)
        return mul(guide, fine), fine, guide

    __call__ = forward

    def predict(self, images: np.ndarray, domain: str, batch_size: int = 8) -> np.ndarray:
        """Decode ``[B, H, W, C]`` images to ``[B, N, 2]`` coordinates in model geometry."""
        from .numerics import no_grad

        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                fused, _, _ = self.forward(images[start:start + batch_size], domain, mode="eval")
                out.append(decode_batch(fused.data))
        return np.concatenate(out, axis=0)
