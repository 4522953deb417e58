"""Transformer building blocks for the backbone and the prompt classifier.

Pre-norm residual convention throughout. Channel attention mixes the
channel axis of a feature map (C x C attention matrix); windowed spatial
attention runs plain multi-head attention inside non-overlapping square
windows, with its residual branch scaled by a fixed factor.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
import math

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, DimensionError
from .numcore import Tensor
from .prompt import MODALITIES, REGIONS, TYPES
from .seeding import substream


@dataclass
class BlockConfig:
    """Desk-scale architecture knobs shared by the backbone and classifier."""

    img_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    num_heads: int = 4
    depth: int = 2
    window_size: int = 4
    mlp_ratio: float = 2.0
    sstb_scale: float = 0.8   # residual-branch scale of the windowed blocks
    k_params: int = 1         # physical parameters predicted by the pretrain head
    seed: int = 0

    def validate(self) -> "BlockConfig":
        if self.img_size % self.patch_size != 0:
            raise ConfigurationError(
                f"patch_size {self.patch_size} must divide img_size {self.img_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"num_heads {self.num_heads} must divide embed_dim {self.embed_dim}")
        if self.grid_side % self.window_size != 0:
            raise ConfigurationError(
                f"window_size {self.window_size} must divide the token grid "
                f"side {self.grid_side}")
        if self.depth < 1 or self.k_params < 1:
            raise ConfigurationError("depth and k_params must be >= 1")
        return self

    @property
    def grid_side(self) -> int:
        return self.img_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def feature_channels(self) -> int:
        # token features from every extraction layer are concatenated
        return self.embed_dim * self.depth

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Lightweight parameter container: walks attributes for named tensors."""

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        sep = "." if prefix else ""
        for key, value in vars(self).items():
            name = f"{prefix}{sep}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif hasattr(value, "named_parameters"):
                out.update(value.named_parameters(name))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if hasattr(item, "named_parameters"):
                        out.update(item.named_parameters(f"{name}.{i}"))
        return out

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)),
                             requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, n_out),
                           requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.gamma, self.beta, self._eps)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(nc.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Standard scaled dot-product self-attention over the token axis."""

    def __init__(self, dim: int, num_heads: int, rng):
        if dim % num_heads != 0:
            raise DimensionError(f"heads {num_heads} must divide dim {dim}")
        self.num_heads = num_heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def forward(self, x: Tensor, need_weights: bool = False):
        b, n, e = x.shape
        h = self.num_heads
        hd = e // h

        def heads(t):
            return t.reshape(b, n, h, hd).transpose(0, 2, 1, 3)

        q, k, v = heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x))
        logits = (q @ k.transpose(0, 1, 3, 2)) * (hd ** -0.5)
        weights = nc.softmax(logits, axis=-1)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, e)
        out = self.wo(out)
        if need_weights:
            return out, weights.data.copy()
        return out


class TransformerLayer(Module):
    """Pre-norm residual block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(Module):
    """Tokenize an image: linear map of each flattened patch plus a learned
    positional embedding."""

    def __init__(self, img_size: int, patch_size: int, embed_dim: int, rng):
        if img_size % patch_size != 0:
            raise DimensionError(
                f"patch size {patch_size} must divide image size {img_size}")
        self.img_size = img_size
        self.patch_size = patch_size
        self.num_tokens = (img_size // patch_size) ** 2
        self.proj = Linear(patch_size * patch_size, embed_dim, rng)
        bound = 1.0 / math.sqrt(embed_dim)
        self.pos = Tensor(rng.uniform(-bound, bound, (self.num_tokens, embed_dim)),
                          requires_grad=True)

    def forward(self, image: Tensor) -> Tensor:
        b = image.shape[0]
        s, p = self.img_size, self.patch_size
        if image.shape[1:] != (1, s, s):
            raise DimensionError(
                f"expected image batch (b, 1, {s}, {s}), got {image.shape}")
        g = s // p
        patches = (image.reshape(b, g, p, g, p)
                        .transpose(0, 1, 3, 2, 4)
                        .reshape(b, g * g, p * p))
        return self.proj(patches) + self.pos


def window_partition(x: Tensor, grid: int, window: int) -> Tensor:
    """(b, grid*grid, E) tokens -> (b*windows, window*window, E)."""
    b, n, e = x.shape
    if n != grid * grid:
        raise DimensionError(f"token count {n} is not a {grid}x{grid} grid")
    if grid % window != 0:
        raise DimensionError(f"window {window} must divide grid side {grid}")
    w = grid // window
    return (x.reshape(b, w, window, w, window, e)
             .transpose(0, 1, 3, 2, 4, 5)
             .reshape(b * w * w, window * window, e))


def window_merge(x: Tensor, grid: int, window: int, batch: int) -> Tensor:
    """Inverse of window_partition."""
    w = grid // window
    e = x.shape[-1]
    return (x.reshape(batch, w, w, window, window, e)
             .transpose(0, 1, 3, 2, 4, 5)
             .reshape(batch, grid * grid, e))


class TransposedAttentionBlock(Module):
    """Attention over the channel axis of a (b, C, N) feature map.

    Queries, keys, and values are per-position projections of the channel
    vector; the C x C attention matrix mixes channels, complementing the
    spatial attention elsewhere in the backbone. A zero value projection
    makes the block an exact identity (the output projection carries no
    bias).
    """

    def __init__(self, channels: int, rng):
        self.norm = LayerNorm(channels)
        self.wq = Linear(channels, channels, rng)
        self.wk = Linear(channels, channels, rng)
        self.wv = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng, bias=False)

    def forward(self, fmap: Tensor, need_weights: bool = False):
        b, c, n = fmap.shape
        tokens = self.norm(fmap.transpose(0, 2, 1))       # (b, N, C)
        q = self.wq(tokens).transpose(0, 2, 1)             # (b, C, N)
        k = self.wk(tokens).transpose(0, 2, 1)
        v = self.wv(tokens).transpose(0, 2, 1)
        logits = (q @ k.transpose(0, 2, 1)) * (n ** -0.5)  # (b, C, C)
        weights = nc.softmax(logits, axis=-1)
        mixed = weights @ v                                # (b, C, N)
        proj = self.out(mixed.transpose(0, 2, 1))          # (b, N, C)
        result = fmap + proj.transpose(0, 2, 1)
        if need_weights:
            return result, weights.data.copy()
        return result


class ScaledWindowAttentionBlock(Module):
    """Windowed spatial attention + MLP with the residual branch scaled.

    out = x + scale * Attn_w(LN(x)); out = out + scale * MLP(LN(out)).
    scale = 0 collapses the block to an exact identity. The attention
    shares its parametrization with MultiHeadAttention, so a window
    spanning the whole grid reproduces full spatial attention.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int,
                 mlp_ratio: float, scale: float, rng):
        self.window_size = window_size
        self.scale = float(scale)
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor) -> Tensor:
        b, n, e = x.shape
        grid = math.isqrt(n)
        if grid * grid != n:
            raise DimensionError(f"token count {n} is not a square grid")
        windows = window_partition(self.norm1(x), grid, self.window_size)
        attended = window_merge(self.attn(windows), grid, self.window_size, b)
        x = x + self.scale * attended
        return x + self.scale * self.mlp(self.norm2(x))


class PromptClassifier(Module):
    """Small ViT that predicts the modality, region, and type prompt fields."""

    HEAD_VOCABS = {"modality": MODALITIES, "region": REGIONS, "type": TYPES}

    def __init__(self, cfg: BlockConfig, rng=None):
        cfg.validate()
        rng = rng if rng is not None else substream(cfg.seed, "init", "classifier")
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.img_size, cfg.patch_size, cfg.embed_dim, rng)
        self.layers = [
            TransformerLayer(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng)
            for _ in range(cfg.depth)
        ]
        self.norm = LayerNorm(cfg.embed_dim)
        self.head_modality = Linear(cfg.embed_dim, len(MODALITIES), rng)
        self.head_region = Linear(cfg.embed_dim, len(REGIONS), rng)
        self.head_type = Linear(cfg.embed_dim, len(TYPES), rng)

    def forward(self, image: Tensor) -> dict:
        """Logits per task for a (b, 1, S, S) image batch."""
        tokens = self.patch_embed(image)
        for layer in self.layers:
            tokens = layer(tokens)
        pooled = self.norm(tokens.mean(axis=1))
        return {
            "modality": self.head_modality(pooled),
            "region": self.head_region(pooled),
            "type": self.head_type(pooled),
        }

    def classify(self, image: np.ndarray) -> dict:
        """Probability vectors (each summing to 1) for one prepared image."""
        batch = Tensor(np.asarray(image, dtype=np.float64)[None, None])
        logits = self.forward(batch)
        return {
            task: nc.softmax(out, axis=-1).data[0].copy()
            for task, out in logits.items()
        }
