"""Shifted-window self-attention and the basic / domain-adaptive blocks.

A domain-adaptive block keeps key, value, output projection, norms and MLP
shared, gives every domain its own query projection, and scales the
attention branch and the post-residual MLP sum by per-domain channel
diagonals::

    y_hat = d1[dom] * MSA_q[dom](LN(x)) + x
    y     = d2[dom] * (MLP(LN(y_hat)) + y_hat)

With ``d1 = d2 = 1`` and a query shared by all domains this is the plain
pre-norm transformer block.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .layers import layer_norm, linear
from .numerics import (
    ContractError, DimensionError, Tensor, add, as_tensor, gelu, matmul, mul,
    reshape, roll, softmax, take, transpose,
)
from .params import ParamStore, UnknownDomainError, domain_name, shared_name, trunc_normal

__all__ = [
    "window_partition", "window_reverse", "shift_mask", "relative_position_index",
    "effective_window", "WindowAttention", "TransformerBlock", "msa",
]


def effective_window(height: int, width: int, window: int, shift: int) -> tuple[int, int]:
    """Clamp the window to small maps; maps no larger than the window never shift."""
    if min(height, width) <= window:
        return min(height, width), 0
    return window, shift


@lru_cache(maxsize=None)
def shift_mask(height: int, width: int, window: int, shift: int) -> np.ndarray | None:
    """Boolean ``[nW, n, n]`` mask, True where attention must be suppressed.

    After a cyclic shift by ``-shift`` the bottom/right windows hold tokens
    from opposite image borders; tokens from different source regions must
    not attend to each other. Returns ``None`` when ``shift == 0``.
    """
    if shift == 0:
        return None
    labels = np.zeros((height, width), dtype=np.int64)
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in bands:
        for ws in bands:
            labels[hs, ws] = label
            label += 1
    lw = labels.reshape(height // window, window, width // window, window)
    lw = lw.transpose(0, 2, 1, 3).reshape(-1, window * window)
    mask = lw[:, :, None] != lw[:, None, :]
    mask.setflags(write=False)
    return mask


def window_partition(x, window: int, shift: int = 0):
    """Cyclic-shift a ``[B, H, W, C]`` map and tile it into windows.

    Returns ``(windows, mask)`` where ``windows`` is ``[B * nW, window**2, C]``
    and ``mask`` is as in :func:`shift_mask`.
    """
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % window or W % window:
        raise ContractError(f"window {window} does not divide spatial extent {H}x{W}")
    if not 0 <= shift < window:
        raise ContractError(f"shift must satisfy 0 <= shift < window, got {shift}")
    if shift:
        x = roll(x, (-shift, -shift), (1, 2))
    x = reshape(x, (B, H // window, window, W // window, window, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (-1, window * window, C)), shift_mask(H, W, window, shift)


def window_reverse(windows, window: int, height: int, width: int, shift: int = 0) -> Tensor:
    windows = as_tensor(windows)
    C = windows.shape[-1]
    nh, nw = height // window, width // window
    x = reshape(windows, (-1, nh, nw, window, window, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (-1, height, width, C))
    if shift:
        x = roll(x, (shift, shift), (1, 2))
    return x


@lru_cache(maxsize=None)
def relative_position_index(window: int, table_window: int | None = None) -> np.ndarray:
    """Index into a ``(2w-1)**2`` bias table for every token pair of a window.

    ``table_window`` sizes the table; a clamped (smaller) window reuses the
    central part of the full table.
    """
    w = table_window or window
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    idx = (rel[0] + w - 1) * (2 * w - 1) + (rel[1] + w - 1)
    idx.setflags(write=False)
    return idx


class WindowAttention:
    """Multi-head self-attention parameters and forward pass.

    Key, value, output projection and relative position bias are shared.
    The query is per domain when ``domain_query`` is set, otherwise shared.
    """

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int, window: int,
                 domain_query: bool = True):
        if dim % heads:
            raise ContractError(f"heads={heads} must divide embedding dim {dim}")
        self.store, self.prefix = store, prefix
        self.dim, self.heads, self.window = dim, heads, window
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.domain_query = domain_query

    def _shared(self, name):
        return self.store[shared_name(f"{self.prefix}/{name}")]

    def init_shared(self, rng: np.random.Generator) -> None:
        C, s = self.dim, self.store
        for proj in ("k", "v", "proj"):
            s.create(shared_name(f"{self.prefix}/{proj}.weight"), trunc_normal(rng, (C, C)))
            # no key bias: it shifts each query's logits by a constant, which softmax cancels
            if proj != "k":
                s.create(shared_name(f"{self.prefix}/{proj}.bias"), np.zeros(C))
        if not self.domain_query:
            s.create(shared_name(f"{self.prefix}/q.weight"), trunc_normal(rng, (C, C)))
            s.create(shared_name(f"{self.prefix}/q.bias"), np.zeros(C))
        s.create(shared_name(f"{self.prefix}/rel_bias"),
                 trunc_normal(rng, ((2 * self.window - 1) ** 2, self.heads)))

    def domain_param_shapes(self) -> dict[str, tuple[int, ...]]:
        if not self.domain_query:
            return {}
        return {f"{self.prefix}/q.weight": (self.dim, self.dim), f"{self.prefix}/q.bias": (self.dim,)}

    def init_domain(self, domain: str, rng: np.random.Generator) -> None:
        if self.domain_query:
            self.store.create(domain_name(domain, f"{self.prefix}/q.weight"),
                              trunc_normal(rng, (self.dim, self.dim)))
            self.store.create(domain_name(domain, f"{self.prefix}/q.bias"), np.zeros(self.dim))

    def query(self, domain: str | None) -> tuple[Tensor, Tensor]:
        if not self.domain_query:
            return self._shared("q.weight"), self._shared("q.bias")
        if domain is None:
            raise ContractError(f"{self.prefix}: domain-adaptive attention needs a domain")
        key = domain_name(domain, f"{self.prefix}/q.weight")
        if key not in self.store:
            raise UnknownDomainError(f"domain {domain!r} is not registered")
        return self.store[key], self.store[domain_name(domain, f"{self.prefix}/q.bias")]

    def __call__(self, tokens, domain: str | None = None, mask: np.ndarray | None = None,
                 window: int | None = None) -> Tensor:
        tokens = as_tensor(tokens)
        Bw, n, C = tokens.shape
        if C != self.dim:
            raise DimensionError(f"{self.prefix}: tokens have {C} channels, expected {self.dim}")
        h, hd = self.heads, self.head_dim
        qw, qb = self.query(domain)

        def heads(t):
            return transpose(reshape(t, (Bw, n, h, hd)), (0, 2, 1, 3))

        q = heads(linear(tokens, qw, qb))
        k = heads(linear(tokens, self._shared("k.weight")))
        v = heads(linear(tokens, self._shared("v.weight"), self._shared("v.bias")))
        logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), self.scale)

        w = window if window is not None else int(round(np.sqrt(n)))
        if w * w == n and w <= self.window:
            idx = relative_position_index(w, self.window)
            bias = take(self._shared("rel_bias"), idx.reshape(-1))
            bias = transpose(reshape(bias, (n, n, h)), (2, 0, 1))
            logits = add(logits, bias)
        if mask is not None:
            nW = mask.shape[0]
            if mask.shape[1:] != (n, n) or Bw % nW:
                raise DimensionError(f"mask shape {mask.shape} incompatible with {Bw} windows of {n} tokens")
            neg = np.where(mask, -np.inf, 0.0).astype(tokens.dtype)
            logits = reshape(logits, (Bw // nW, nW, h, n, n))
            logits = add(logits, neg[None, :, None])
            logits = reshape(logits, (Bw, h, n, n))
        attn = softmax(logits, axis=-1)
        out = transpose(matmul(attn, v), (0, 2, 1, 3))
        out = reshape(out, (Bw, n, C))
        return linear(out, self._shared("proj.weight"), self._shared("proj.bias"))


def msa(tokens, attn: WindowAttention, domain: str | None = None, mask=None) -> Tensor:
    return attn(tokens, domain, mask)


class TransformerBlock:
    """Pre-norm windowed transformer block; domain-adaptive when flags are set.

    ``shift`` is the nominal cyclic shift; it is dropped when the map is no
    larger than the window.
    """

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int, window: int,
                 shift: int = 0, mlp_ratio: int = 4, domain_query: bool = True,
                 domain_diagonal: bool = True):
        self.store, self.prefix = store, prefix
        self.dim, self.window, self.shift = dim, window, shift
        self.hidden = dim * mlp_ratio
        self.domain_diagonal = domain_diagonal
        self.attn = WindowAttention(store, f"{prefix}/attn", dim, heads, window, domain_query)

    @property
    def adaptive(self) -> bool:
        return self.attn.domain_query or self.domain_diagonal

    def _p(self, name):
        return self.store[shared_name(f"{self.prefix}/{name}")]

    def init_shared(self, rng: np.random.Generator) -> None:
        C, Hd, s = self.dim, self.hidden, self.store
        for norm in ("norm1", "norm2"):
            s.create(shared_name(f"{self.prefix}/{norm}.weight"), np.ones(C))
            s.create(shared_name(f"{self.prefix}/{norm}.bias"), np.zeros(C))
        self.attn.init_shared(rng)
        s.create(shared_name(f"{self.prefix}/fc1.weight"), trunc_normal(rng, (C, Hd)))
        s.create(shared_name(f"{self.prefix}/fc1.bias"), np.zeros(Hd))
        s.create(shared_name(f"{self.prefix}/fc2.weight"), trunc_normal(rng, (Hd, C)))
        s.create(shared_name(f"{self.prefix}/fc2.bias"), np.zeros(C))

    def domain_param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = self.attn.domain_param_shapes()
        if self.domain_diagonal:
            shapes[f"{self.prefix}/d1"] = (self.dim,)
            shapes[f"{self.prefix}/d2"] = (self.dim,)
        return shapes

    def init_domain(self, domain: str, rng: np.random.Generator) -> None:
        self.attn.init_domain(domain, rng)
        if self.domain_diagonal:
            self.store.create(domain_name(domain, f"{self.prefix}/d1"), np.ones(self.dim))
            self.store.create(domain_name(domain, f"{self.prefix}/d2"), np.ones(self.dim))

    def _diagonals(self, domain):
        if domain is None:
            raise ContractError(f"{self.prefix}: domain-adaptive block needs a domain")
        key = domain_name(domain, f"{self.prefix}/d1")
        if key not in self.store:
            raise UnknownDomainError(f"domain {domain!r} is not registered")
        return self.store[key], self.store[domain_name(domain, f"{self.prefix}/d2")]

    def __call__(self, x, domain: str | None = None) -> Tensor:
        x = as_tensor(x)
        B, H, W, C = x.shape
        if C != self.dim:
            raise DimensionError(f"{self.prefix}: input has {C} channels, expected {self.dim}")
        d1 = d2 = None
        if self.domain_diagonal:
            d1, d2 = self._diagonals(domain)
        win, shift = effective_window(H, W, self.window, self.shift)

        h = layer_norm(x, self._p("norm1.weight"), self._p("norm1.bias"))
        windows, mask = window_partition(h, win, shift)
        a = self.attn(windows, domain, mask, win)
        a = window_reverse(a, win, H, W, shift)
        if d1 is not None:
            a = mul(a, d1)
        y = add(a, x)

        m = layer_norm(y, self._p("norm2.weight"), self._p("norm2.bias"))
        m = gelu(linear(m, self._p("fc1.weight"), self._p("fc1.bias")))
        m = linear(m, self._p("fc2.weight"), self._p("fc2.bias"))
        out = add(m, y)
        if d2 is not None:
            out = mul(out, d2)
        return out
