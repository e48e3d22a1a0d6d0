"""Named parameter registry split into shared and per-domain namespaces."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .numerics import Tensor, get_dtype

SHARED = "shared"
DOMAIN = "domain"


def shared_name(name: str) -> str:
    return f"{SHARED}/{name}"


def domain_name(domain: str, name: str) -> str:
    return f"{DOMAIN}/{domain}/{name}"


def namespace_of(full_name: str) -> str:
    """``'shared'`` or ``'domain/<name>'`` for a fully qualified parameter name."""
    parts = full_name.split("/")
    if parts[0] == SHARED:
        return SHARED
    if parts[0] == DOMAIN and len(parts) > 2:
        return f"{DOMAIN}/{parts[1]}"
    raise KeyError(f"parameter name {full_name!r} has no namespace prefix")


class ParamStore:
    """Ordered mapping of fully qualified names to parameter tensors.

    Batch-norm running statistics live in ``buffers``; they are state, not
    parameters, and are never touched by the optimiser.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.buffers: dict[str, object] = {}

    def create(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        namespace_of(name)
        t = Tensor(np.array(value, dtype=get_dtype()), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def keys(self):
        return self._params.keys()

    def values(self):
        return self._params.values()

    def items(self):
        return self._params.items()

    def names(self, namespace: str | None = None) -> list[str]:
        if namespace is None:
            return list(self._params)
        return [n for n in self._params if namespace_of(n) == namespace]

    def domains(self) -> list[str]:
        seen: dict[str, None] = {}
        for n in self._params:
            ns = namespace_of(n)
            if ns != SHARED:
                seen[ns.split("/", 1)[1]] = None
        return list(seen)

    def count(self, namespace: str | None = None) -> int:
        return sum(self._params[n].size for n in self.names(namespace))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def checksum(self, namespace: str | None = None) -> str:
        h = hashlib.sha256()
        for n in sorted(self.names(namespace)):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._params[n].data).tobytes())
        return h.hexdigest()

    def snapshot(self, namespace: str | None = None) -> dict[str, np.ndarray]:
        return {n: self._params[n].data.copy() for n in self.names(namespace)}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            p = self[n]
            if p.shape != v.shape:
                raise ValueError(f"shape mismatch for {n}: {p.shape} vs {v.shape}")
            p.data = np.array(v, dtype=p.dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws with anything beyond two standard deviations redrawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class UnknownDomainError(KeyError):
    """A domain was referenced that has no registered parameters."""
