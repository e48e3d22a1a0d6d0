"""Domain-adaptive convolution decoder and the dilated guidance network."""

from __future__ import annotations

import numpy as np

from .encoder import EncoderConfig
from .layers import BatchNormState, Conv2dSpec, batch_norm, conv2d, relu, resize_bilinear, upsample_bilinear
from .numerics import ContractError, Tensor, as_tensor, concat, sigmoid
from .params import ParamStore, UnknownDomainError, domain_name, kaiming_normal, shared_name

__all__ = ["DAC", "Decoder", "Guidance", "dac", "DEFAULT_DILATIONS"]

DEFAULT_DILATIONS = (1, 2, 4, 8, 16)
# initial fine-head probability; keeps the fused map near the sparse target level
HEAD_PRIOR = 0.01


def _domain_param(store: ParamStore, domain: str | None, name: str) -> Tensor:
    if domain is None:
        raise ContractError(f"{name}: a domain is required")
    key = domain_name(domain, name)
    if key not in store:
        raise UnknownDomainError(f"domain {domain!r} is not registered")
    return store[key]


class DAC:
    """Per-domain 3x3 channel-wise conv, shared point-wise conv, batch norm, ReLU."""

    def __init__(self, store: ParamStore, prefix: str, in_channels: int, out_channels: int):
        self.store, self.prefix = store, prefix
        self.dw = Conv2dSpec(in_channels, in_channels, (3, 3), padding=1, groups=in_channels)
        self.pw = Conv2dSpec(in_channels, out_channels, (1, 1))

    @property
    def bn_key(self) -> str:
        return shared_name(f"{self.prefix}/bn")

    def init_shared(self, rng: np.random.Generator) -> None:
        s, pw = self.store, self.pw
        s.create(shared_name(f"{self.prefix}/pw.weight"),
                 kaiming_normal(rng, pw.weight_shape, pw.in_channels))
        s.create(shared_name(f"{self.prefix}/pw.bias"), np.zeros(pw.out_channels))
        s.create(shared_name(f"{self.prefix}/bn.weight"), np.ones(pw.out_channels))
        s.create(shared_name(f"{self.prefix}/bn.bias"), np.zeros(pw.out_channels))
        s.buffers[self.bn_key] = BatchNormState(pw.out_channels)

    def domain_param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {f"{self.prefix}/dw.weight": self.dw.weight_shape,
                f"{self.prefix}/dw.bias": (self.dw.out_channels,)}

    def init_domain(self, domain: str, rng: np.random.Generator) -> None:
        self.store.create(domain_name(domain, f"{self.prefix}/dw.weight"),
                          kaiming_normal(rng, self.dw.weight_shape, 9))
        self.store.create(domain_name(domain, f"{self.prefix}/dw.bias"), np.zeros(self.dw.out_channels))

    def __call__(self, x, domain: str | None, mode: str = "train") -> Tensor:
        s = self.store
        w = _domain_param(s, domain, f"{self.prefix}/dw.weight")
        b = s[domain_name(domain, f"{self.prefix}/dw.bias")]
        y = conv2d(x, self.dw, w, b)
        y = conv2d(y, self.pw, s[shared_name(f"{self.prefix}/pw.weight")],
                   s[shared_name(f"{self.prefix}/pw.bias")])
        y = batch_norm(y, s[shared_name(f"{self.prefix}/bn.weight")],
                       s[shared_name(f"{self.prefix}/bn.bias")], s.buffers[self.bn_key], mode)
        return relu(y)


def dac(x, domain: str, layer: DAC, mode: str = "train") -> Tensor:
    return layer(x, domain, mode)


class Decoder:
    """U-Net style decoder over the encoder pyramid.

    From the deepest map, each step upsamples by two, concatenates the skip
    map and applies two DAC layers. The H/4 result is upsampled to full
    resolution and a per-domain 1x1 head with sigmoid gives the fine heatmap.
    """

    def __init__(self, store: ParamStore, config: EncoderConfig, prefix: str = "decoder"):
        self.store, self.config, self.prefix = store, config, prefix
        self.steps: list[tuple[DAC, DAC]] = []
        for s in (2, 1, 0):
            c_skip, c_deep = config.stage_channels(s), config.stage_channels(s + 1)
            self.steps.append((
                DAC(store, f"{prefix}/up{s}.dac1", c_deep + c_skip, c_skip),
                DAC(store, f"{prefix}/up{s}.dac2", c_skip, c_skip),
            ))
        self.head_in = config.embed_dim

    @property
    def layers(self) -> list[DAC]:
        return [d for pair in self.steps for d in pair]

    def init_shared(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.init_shared(rng)

    def domain_param_shapes(self, num_landmarks: int) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            shapes.update(layer.domain_param_shapes())
        shapes[f"{self.prefix}/head.weight"] = (1, 1, self.head_in, num_landmarks)
        shapes[f"{self.prefix}/head.bias"] = (num_landmarks,)
        return shapes

    def init_domain(self, domain: str, num_landmarks: int, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.init_domain(domain, rng)
        self.store.create(domain_name(domain, f"{self.prefix}/head.weight"),
                          kaiming_normal(rng, (1, 1, self.head_in, num_landmarks), self.head_in) * 0.1)
        self.store.create(domain_name(domain, f"{self.prefix}/head.bias"),
                          np.full(num_landmarks, np.log(HEAD_PRIOR / (1 - HEAD_PRIOR))))

    def __call__(self, pyramid: list[Tensor], domain: str, mode: str = "train") -> Tensor:
        if len(pyramid) != 4:
            raise ContractError(f"decoder needs a 4-level pyramid, got {len(pyramid)}")
        x = pyramid[3]
        for (d1, d2), skip in zip(self.steps, (pyramid[2], pyramid[1], pyramid[0])):
            x = upsample_bilinear(x, 2)
            if x.shape[1:3] != skip.shape[1:3]:
                raise ContractError(f"pyramid level mismatch: {x.shape} vs skip {skip.shape}")
            x = concat([x, skip], axis=-1)
            x = d2(d1(x, domain, mode), domain, mode)
        x = upsample_bilinear(x, self.config.patch_size)
        w = _domain_param(self.store, domain, f"{self.prefix}/head.weight")
        b = self.store[domain_name(domain, f"{self.prefix}/head.bias")]
        spec = Conv2dSpec(self.head_in, w.shape[-1], (1, 1))
        return sigmoid(conv2d(x, spec, w, b))


class Guidance:
    """Per-domain stack of dilated 3x3 convs plus a 1x1 head on a 4x downsampled image."""

    def __init__(self, store: ParamStore, in_channels: int, width: int = 16,
                 dilations=DEFAULT_DILATIONS, factor: int = 4, prefix: str = "guidance"):
        self.store, self.prefix = store, prefix
        self.factor = factor
        self.width = width
        self.specs = []
        c = in_channels
        for d in dilations:
            self.specs.append(Conv2dSpec(c, width, (3, 3), padding=d, dilation=d))
            c = width

    def receptive_field(self) -> int:
        return 1 + sum(s.dilation * (s.kernel[0] - 1) for s in self.specs)

    def domain_param_shapes(self, num_landmarks: int) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, spec in enumerate(self.specs):
            shapes[f"{self.prefix}/conv{i}.weight"] = spec.weight_shape
            shapes[f"{self.prefix}/conv{i}.bias"] = (spec.out_channels,)
        shapes[f"{self.prefix}/head.weight"] = (1, 1, self.width, num_landmarks)
        shapes[f"{self.prefix}/head.bias"] = (num_landmarks,)
        return shapes

    def init_shared(self, rng: np.random.Generator) -> None:
        pass

    def init_domain(self, domain: str, num_landmarks: int, rng: np.random.Generator) -> None:
        s = self.store
        for i, spec in enumerate(self.specs):
            fan_in = 9 * spec.in_channels
            s.create(domain_name(domain, f"{self.prefix}/conv{i}.weight"),
                     kaiming_normal(rng, spec.weight_shape, fan_in))
            s.create(domain_name(domain, f"{self.prefix}/conv{i}.bias"), np.zeros(spec.out_channels))
        s.create(domain_name(domain, f"{self.prefix}/head.weight"),
                 kaiming_normal(rng, (1, 1, self.width, num_landmarks), self.width) * 0.1)
        s.create(domain_name(domain, f"{self.prefix}/head.bias"), np.zeros(num_landmarks))

    def __call__(self, image, domain: str) -> Tensor:
        image = as_tensor(image)
        _, H, W, _ = image.shape
        f = self.factor
        x = resize_bilinear(image, H // f, W // f)
        for i, spec in enumerate(self.specs):
            w = _domain_param(self.store, domain, f"{self.prefix}/conv{i}.weight")
            b = self.store[domain_name(domain, f"{self.prefix}/conv{i}.bias")]
            x = relu(conv2d(x, spec, w, b))
        w = self.store[domain_name(domain, f"{self.prefix}/head.weight")]
        b = self.store[domain_name(domain, f"{self.prefix}/head.bias")]
        x = sigmoid(conv2d(x, Conv2dSpec(self.width, w.shape[-1], (1, 1)), w, b))
        return resize_bilinear(x, H, W)
