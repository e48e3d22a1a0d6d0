"""Four-stage hierarchical transformer encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import TransformerBlock
from .layers import layer_norm, linear
from .numerics import ContractError, DimensionError, Tensor, as_tensor, reshape, transpose
from .params import ParamStore, shared_name, trunc_normal

__all__ = ["EncoderConfig", "Encoder", "patch_embed", "patch_merge"]


@dataclass
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    window: int = 4
    mlp_ratio: int = 4
    in_channels: int = 1
    domain_query: bool = True
    domain_diagonal: bool = True

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ContractError("encoder needs exactly 4 stages")
        if min(self.depths) < 1:
            raise ContractError(f"stage depths must be >= 1, got {self.depths}")
        for s, h in enumerate(self.heads):
            if self.stage_channels(s) % h:
                raise ContractError(f"stage {s}: {h} heads do not divide {self.stage_channels(s)} channels")

    def stage_channels(self, stage: int) -> int:
        return self.embed_dim * 2 ** stage

    def stage_stride(self, stage: int) -> int:
        return self.patch_size * 2 ** stage

    @property
    def size_divisor(self) -> int:
        return self.stage_stride(3)


def patch_embed(image, weight, bias, norm_weight, norm_bias, patch: int = 4) -> Tensor:
    """Flatten non-overlapping ``patch x patch`` tiles and project them linearly."""
    image = as_tensor(image)
    B, H, W, C = image.shape
    if H % patch or W % patch:
        raise ContractError(f"image {H}x{W} is not divisible by patch size {patch}")
    x = reshape(image, (B, H // patch, patch, W // patch, patch, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (B, H // patch, W // patch, patch * patch * C))
    return layer_norm(linear(x, weight, bias), norm_weight, norm_bias)


def patch_merge(x, norm_weight, norm_bias, weight) -> Tensor:
    """Concatenate each 2x2 neighbourhood (4C), normalise, project to 2C."""
    x = as_tensor(x)
    B, h, w, C = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"patch merging needs even extents, got {h}x{w}")
    # neighbourhood order (0,0), (1,0), (0,1), (1,1) as (row, col) offsets
    t = reshape(x, (B, h // 2, 2, w // 2, 2, C))
    t = transpose(t, (0, 1, 3, 4, 2, 5))
    t = reshape(t, (B, h // 2, w // 2, 4 * C))
    return linear(layer_norm(t, norm_weight, norm_bias), weight)


class Encoder:
    """Patch embedding, four block stacks, and patch merging between stages."""

    def __init__(self, store: ParamStore, config: EncoderConfig, prefix: str = "encoder"):
        self.store, self.config, self.prefix = store, config, prefix
        self.stages: list[list[TransformerBlock]] = []
        for s, (depth, heads) in enumerate(zip(config.depths, config.heads)):
            C = config.stage_channels(s)
            blocks = [
                TransformerBlock(
                    store, f"{prefix}/stage{s}/block{i}", C, heads, config.window,
                    shift=0 if i % 2 == 0 else config.window // 2,
                    mlp_ratio=config.mlp_ratio, domain_query=config.domain_query,
                    domain_diagonal=config.domain_diagonal,
                )
                for i in range(depth)
            ]
            self.stages.append(blocks)

    @property
    def blocks(self) -> list[TransformerBlock]:
        return [b for stage in self.stages for b in stage]

    def _p(self, name):
        return self.store[shared_name(f"{self.prefix}/{name}")]

    def init_shared(self, rng: np.random.Generator) -> None:
        cfg, s = self.config, self.store
        C0 = cfg.embed_dim
        in_dim = cfg.patch_size ** 2 * cfg.in_channels
        s.create(shared_name(f"{self.prefix}/patch_embed.weight"), trunc_normal(rng, (in_dim, C0)))
        s.create(shared_name(f"{self.prefix}/patch_embed.bias"), np.zeros(C0))
        s.create(shared_name(f"{self.prefix}/patch_embed.norm.weight"), np.ones(C0))
        s.create(shared_name(f"{self.prefix}/patch_embed.norm.bias"), np.zeros(C0))
        for stage, blocks in enumerate(self.stages):
            for b in blocks:
                b.init_shared(rng)
            if stage < 3:
                C = cfg.stage_channels(stage)
                s.create(shared_name(f"{self.prefix}/merge{stage}.norm.weight"), np.ones(4 * C))
                s.create(shared_name(f"{self.prefix}/merge{stage}.norm.bias"), np.zeros(4 * C))
                s.create(shared_name(f"{self.prefix}/merge{stage}.weight"), trunc_normal(rng, (4 * C, 2 * C)))

    def domain_param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for b in self.blocks:
            shapes.update(b.domain_param_shapes())
        return shapes

    def init_domain(self, domain: str, rng: np.random.Generator) -> None:
        for b in self.blocks:
            b.init_domain(domain, rng)

    def embed(self, image) -> Tensor:
        image = as_tensor(image)
        _, H, W, C = image.shape
        d = self.config.size_divisor
        if H % d or W % d:
            raise ContractError(f"input {H}x{W} must be divisible by {d}")
        if C != self.config.in_channels:
            raise DimensionError(f"encoder expects {self.config.in_channels} image channels, got {C}")
        return patch_embed(image, self._p("patch_embed.weight"), self._p("patch_embed.bias"),
                           self._p("patch_embed.norm.weight"), self._p("patch_embed.norm.bias"),
                           self.config.patch_size)

    def merge(self, x, stage: int) -> Tensor:
        return patch_merge(x, self._p(f"merge{stage}.norm.weight"), self._p(f"merge{stage}.norm.bias"),
                           self._p(f"merge{stage}.weight"))

    def __call__(self, image, domain: str | None) -> list[Tensor]:
        """Return the four stage outputs, each taken before merging."""
        x = self.embed(image)
        pyramid = []
        for stage, blocks in enumerate(self.stages):
            for b in blocks:
                x = b(x, domain)
            pyramid.append(x)
            if stage < 3:
                x = self.merge(x, stage)
        return pyramid


def encode(encoder: Encoder, image, domain: str | None) -> list[Tensor]:
    return encoder(image, domain)
