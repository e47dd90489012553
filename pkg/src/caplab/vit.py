"""Tiny pre-norm vision transformer with a class token.

Q, K, V and the attention output projection are stored as separate weight
tensors so that the attention weights can be addressed (and perturbed)
individually.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ATTENTION_PROJECTIONS = ("q", "k", "v", "proj")


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 2
    num_classes: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if min(self.image_size, self.patch_size, self.embed_dim, self.num_heads,
               self.depth, self.mlp_ratio, self.num_classes) < 1:
            raise ValueError("all VitConfig fields must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2 + 1

    def to_dict(self) -> dict:
        return asdict(self)


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class VitModel:
    """Parameters live in ``self.params`` (insertion order is the canonical order)."""

    def __init__(self, config: VitConfig | None = None, seed: int = 0, dtype=None):
        self.config = config or VitConfig()
        self.dtype = np.dtype(dtype or ad.default_dtype()).type
        self.params: dict[str, Tensor] = {}
        self._init(np.random.default_rng(seed))

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, dtype=self.dtype, name=name)

    def _init(self, rng):
        c = self.config
        d, p = c.embed_dim, c.patch_size
        hidden = d * c.mlp_ratio
        self._add("patch_embed.weight", _trunc_normal(rng, (p * p, d)))
        self._add("patch_embed.bias", np.zeros(d))
        self._add("cls_token", _trunc_normal(rng, (1, 1, d)))
        self._add("pos_embed", _trunc_normal(rng, (c.num_tokens, d)))
        for i in range(c.depth):
            b = f"blocks.{i}"
            self._add(f"{b}.norm1.weight", np.ones(d))
            self._add(f"{b}.norm1.bias", np.zeros(d))
            for proj in ATTENTION_PROJECTIONS:
                self._add(f"{b}.attn.{proj}.weight", _trunc_normal(rng, (d, d)))
                self._add(f"{b}.attn.{proj}.bias", np.zeros(d))
            self._add(f"{b}.norm2.weight", np.ones(d))
            self._add(f"{b}.norm2.bias", np.zeros(d))
            self._add(f"{b}.mlp.fc1.weight", _trunc_normal(rng, (d, hidden)))
            self._add(f"{b}.mlp.fc1.bias", np.zeros(hidden))
            self._add(f"{b}.mlp.fc2.weight", _trunc_normal(rng, (hidden, d)))
            self._add(f"{b}.mlp.fc2.bias", np.zeros(d))
        self._add("norm.weight", np.ones(d))
        self._add("norm.bias", np.zeros(d))
        self._add("head.weight", _trunc_normal(rng, (d, c.num_classes)))
        self._add("head.bias", np.zeros(c.num_classes))

    # ------------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def attention_weight_names(self) -> list[str]:
        return [
            f"blocks.{i}.attn.{proj}.weight"
            for i in range(self.config.depth)
            for proj in ATTENTION_PROJECTIONS
        ]

    def attention_weight_handles(self) -> list[Tensor]:
        """Q, K, V and output-projection weights of every block, block-major."""
        return [self.params[n] for n in self.attention_weight_names()]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def mirror(self) -> "VitModel":
        """Deep copy sharing no storage with ``self``."""
        twin = copy.copy(self)
        twin.params = {}
        for name, p in self.params.items():
            twin.params[name] = Tensor(p.data, requires_grad=True, dtype=p.data.dtype, name=name)
        return twin

    def astype(self, dtype) -> "VitModel":
        twin = self.mirror()
        twin.dtype = np.dtype(dtype).type
        for p in twin.params.values():
            p.data = p.data.astype(twin.dtype)
        return twin

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state dict mismatch: {sorted(missing)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.dims:
                raise ValueError(f"{name}: expected {p.dims}, got {arr.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    # ------------------------------------------------------------------
    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        w, b = self.params[prefix + ".weight"], self.params[prefix + ".bias"]
        y = ad.matmul(x, w)
        return ad.add(y, ad.broadcast_to(b, y.dims))

    def _attention(self, h: Tensor, prefix: str, B: int, N: int) -> Tensor:
        c = self.config
        H, dh = c.num_heads, c.embed_dim // c.num_heads

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

        q = heads(self._linear(h, prefix + ".q"))
        k = heads(self._linear(h, prefix + ".k"))
        v = heads(self._linear(h, prefix + ".v"))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = ad.softmax(scores, axis=-1)
        out = ad.transpose(ad.matmul(att, v), (0, 2, 1, 3))
        return self._linear(ad.reshape(out, (B * N, c.embed_dim)), prefix + ".proj")

    def forward(self, x) -> Tensor:
        """Logits of shape ``(B, num_classes)`` for images shaped ``(B, H, W)``."""
        c = self.config
        x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=self.dtype))
        if x.data.ndim == 2:
            x = ad.reshape(x, (1,) + x.dims)
        if x.data.ndim != 3 or x.dims[1:] != (c.image_size, c.image_size):
            raise ValueError(
                f"expected images of size {c.image_size}x{c.image_size}, got dims {x.dims}"
            )
        if x.data.dtype != self.dtype:
            raise TypeError(f"input dtype {x.data.dtype} does not match model dtype {np.dtype(self.dtype)}")
        B, g, p, D = x.dims[0], c.grid, c.patch_size, c.embed_dim
        T = g * g
        N = T + 1

        patches = ad.reshape(x, (B, g, p, g, p))
        patches = ad.reshape(ad.transpose(patches, (0, 1, 3, 2, 4)), (B * T, p * p))
        tokens = ad.reshape(self._linear(patches, "patch_embed"), (B, T, D))
        cls = ad.broadcast_to(self.params["cls_token"], (B, 1, D))
        h = ad.concat([cls, tokens], axis=1)
        h = ad.add(h, ad.broadcast_to(self.params["pos_embed"], (B, N, D)))
        h = ad.reshape(h, (B * N, D))

        for i in range(c.depth):
            b = f"blocks.{i}"
            y = ad.layer_norm(h, self.params[f"{b}.norm1.weight"], self.params[f"{b}.norm1.bias"])
            h = ad.add(h, self._attention(y, f"{b}.attn", B, N))
            y = ad.layer_norm(h, self.params[f"{b}.norm2.weight"], self.params[f"{b}.norm2.bias"])
            y = self._linear(ad.gelu(self._linear(y, f"{b}.mlp.fc1")), f"{b}.mlp.fc2")
            h = ad.add(h, y)

        h = ad.layer_norm(h, self.params["norm.weight"], self.params["norm.bias"])
        cls_out = ad.slice_(ad.reshape(h, (B, N, D)), (slice(None), 0))
        return self._linear(cls_out, "head")

    __call__ = forward

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(ad.softmax(self.forward(x[i:i + batch_size])).data)
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        return self.predict_proba(x, batch_size).argmax(axis=1)


def weight_hash(model: VitModel) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
