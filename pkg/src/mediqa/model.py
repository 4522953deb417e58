"""Full quality-assessment network and its checkpoint format.

Pipeline: patch embedding -> ViT layers (features concatenated across
layers) -> channel attention -> two prompt-injected windowed attention
stages -> dual-branch per-patch scoring. 2D images aggregate patch scores
with learned weights; 3D volumes score seven salient slices and combine
them through a softmax-normalized slice-weight layer. A separate head
predicts normalized physical acquisition parameters for the upstream
training stage.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numcore as nc
from . import salient
from .blocks import (BlockConfig, Linear, Module, PatchEmbed, PromptClassifier,
                     ScaledWindowAttentionBlock, TransformerLayer,
                     TransposedAttentionBlock)
from .errors import ContractError, CorruptCheckpointError
from .numcore import Tensor
from .prompt import InjectionLayer, PromptVector, inject
from .seeding import substream

WEIGHT_FLOOR = 1e-8       # keeps every patch weight strictly positive
DENOMINATOR_GUARD = 1e-8  # lower bound on the patch-weight sum

CHECKPOINT_MAGIC = b"MIQA"
CHECKPOINT_VERSION = 1

NUM_INJECTION_STAGES = 2


@dataclass
class PatchScores:
    """Per-patch scores, their positive weights, and the aggregate."""

    scores: np.ndarray
    weights: np.ndarray
    overall: float


@dataclass
class SliceScores:
    """Per-slice scores, softmax slice weights, and the volume score."""

    slice_indices: list
    scores: np.ndarray
    weights: np.ndarray
    overall: float


def aggregate_patch_scores(scores: Tensor, weights: Tensor,
                           eps: float = DENOMINATOR_GUARD) -> Tensor:
    """Weighted mean over the last axis: sum(w*s) / sum(w).

    Exactly invariant under uniform weight scaling. The guard only engages
    when the weight sum drops below eps, and then acts as a constant shift
    so the expression stays differentiable.
    """
    numer = (scores * weights).sum(axis=-1)
    denom = weights.sum(axis=-1)
    shortfall = np.maximum(eps - denom.data, 0.0)
    if np.any(shortfall > 0.0):
        denom = denom + Tensor(shortfall)
    return numer / denom


class TokenHead(Module):
    """Two-layer MLP with sigmoid output, applied per token (or per pooled
    feature vector)."""

    def __init__(self, dim: int, rng, out_dim: int = 1):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, out_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return nc.sigmoid(self.fc2(nc.gelu(self.fc1(x))))


class MedIQAModel(Module):
    """Backbone plus scoring, weighting, slice-weight, and parameter heads."""

    def __init__(self, cfg: BlockConfig, rng=None):
        cfg.validate()
        rng = rng if rng is not None else substream(cfg.seed, "init", "model")
        self.cfg = cfg
        channels = cfg.feature_channels
        self.patch_embed = PatchEmbed(cfg.img_size, cfg.patch_size,
                                      cfg.embed_dim, rng)
        self.encoder_layers = [
            TransformerLayer(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng)
            for _ in range(cfg.depth)
        ]
        self.channel_attn = TransposedAttentionBlock(channels, rng)
        self.injections = [InjectionLayer(channels, rng)
                           for _ in range(NUM_INJECTION_STAGES)]
        self.window_blocks = [
            ScaledWindowAttentionBlock(channels, cfg.num_heads, cfg.window_size,
                                       cfg.mlp_ratio, cfg.sstb_scale, rng)
            for _ in range(NUM_INJECTION_STAGES)
        ]
        self.score_head = TokenHead(channels, rng)
        self.weight_head = TokenHead(channels, rng)
        self.slice_weight = Linear(channels, 1, rng)
        self.param_head = TokenHead(channels, rng, out_dim=cfg.k_params)

    # -- forward pieces -----------------------------------------------------

    def extract_features(self, image: Tensor) -> Tensor:
        """Token features from every encoder layer, concatenated along the
        channel axis: (b, sum C_i, N)."""
        tokens = self.patch_embed(image)
        per_layer = []
        for layer in self.encoder_layers:
            tokens = layer(tokens)
            per_layer.append(tokens)
        stacked = nc.concat(per_layer, axis=2)      # (b, N, sum C_i)
        return stacked.transpose(0, 2, 1)

    def encode(self, image: Tensor, encoded_prompt: Optional[np.ndarray]) -> Tensor:
        """Full encoder: features -> channel attention -> injected windowed
        stages. Returns tokens (b, N, C)."""
        fmap = self.channel_attn(self.extract_features(image))
        x = fmap.transpose(0, 2, 1)
        for injection, block in zip(self.injections, self.window_blocks):
            x = inject(x, encoded_prompt, injection)
            x = block(x)
        return x

    def _branches(self, tokens: Tensor):
        b, n, _ = tokens.shape
        scores = self.score_head(tokens).reshape(b, n)
        weights = self.weight_head(tokens).reshape(b, n) + WEIGHT_FLOOR
        return scores, weights

    # -- differentiable entry points used by the training loops --------------

    def patch_q_t(self, image: Tensor, encoded_prompt=None):
        """(aggregate (b,), per-patch scores (b, N), weights (b, N))."""
        tokens = self.encode(image, encoded_prompt)
        scores, weights = self._branches(tokens)
        return aggregate_patch_scores(scores, weights), scores, weights

    def slice_scores_t(self, slices: Tensor, encoded_prompt=None):
        """Volume score from a stack of prepared slices (n, 1, S, S).

        Slice weights come from a linear layer on mean-pooled slice
        features, softmax-normalized so the result stays a convex
        combination of the per-slice scores.
        """
        tokens = self.encode(slices, encoded_prompt)
        scores, weights = self._branches(tokens)
        slice_q = aggregate_patch_scores(scores, weights)         # (n,)
        pooled = tokens.mean(axis=1)                              # (n, C)
        logits = self.slice_weight(pooled).reshape(1, -1)
        slice_w = nc.softmax(logits, axis=-1).reshape(-1)         # (n,)
        overall = (slice_w * slice_q).sum()
        return overall, slice_q, slice_w

    def predict_params_t(self, slices: Tensor, encoded_prompt=None) -> Tensor:
        """Physical-parameter prediction from pooled encoder features, (k,)."""
        tokens = self.encode(slices, encoded_prompt)
        pooled = tokens.mean(axis=1).mean(axis=0).reshape(1, -1)
        return self.param_head(pooled).reshape(-1)

    # -- numpy-facing API -----------------------------------------------------

    def score_2d(self, image: np.ndarray,
                 prompt: Optional[PromptVector] = None) -> PatchScores:
        """Score one prepared (S, S) image in [0, 1]."""
        encoded = prompt.encoded() if prompt is not None else None
        batch = Tensor(np.asarray(image, dtype=np.float64)[None, None])
        q, scores, weights = self.patch_q_t(batch, encoded)
        return PatchScores(scores=scores.data[0].copy(),
                           weights=weights.data[0].copy(),
                           overall=float(q.data[0]))

    def score_3d(self, volume: salient.Volume,
                 prompt: Optional[PromptVector] = None,
                 use_salient: bool = True,
                 fg_threshold: float = salient.DEFAULT_FG_THRESHOLD,
                 min_fg_ratio: float = salient.DEFAULT_MIN_FG_RATIO) -> SliceScores:
        """Score a volume through its salient slices (or the center slice
        only when salient selection is disabled)."""
        if use_salient:
            sel = salient.select_slices(volume, self.cfg.img_size,
                                        fg_threshold, min_fg_ratio)
        else:
            sel = salient.center_slice(volume, self.cfg.img_size)
        encoded = prompt.encoded() if prompt is not None else None
        stack = Tensor(sel.slices[:, None])
        overall, slice_q, slice_w = self.slice_scores_t(stack, encoded)
        return SliceScores(slice_indices=list(sel.selected),
                           scores=slice_q.data.copy(),
                           weights=slice_w.data.copy(),
                           overall=float(overall.data))

    def predict_params(self, sample,
                       prompt: Optional[PromptVector] = None) -> np.ndarray:
        """Normalized physical parameters, each in (0, 1)."""
        encoded = prompt.encoded() if prompt is not None else None
        if isinstance(sample, salient.Volume):
            if sample.depth > 1:
                sel = salient.select_slices(sample, self.cfg.img_size)
                stack = sel.slices[:, None]
            else:
                stack = salient.normalize_resize(
                    sample.slice_at(0), self.cfg.img_size)[None, None]
        else:
            stack = salient.normalize_resize(
                np.asarray(sample, dtype=np.float64), self.cfg.img_size)[None, None]
        return self.predict_params_t(Tensor(stack), encoded).data.copy()

    # -- stage transition ------------------------------------------------------

    def reset_quality_heads(self, seed: int) -> None:
        """Fresh score/weight/slice-weight heads for the fine-tuning stage;
        encoder and parameter head carry over."""
        rng = substream(seed, "reset-heads")
        channels = self.cfg.feature_channels
        self.score_head = TokenHead(channels, rng)
        self.weight_head = TokenHead(channels, rng)
        self.slice_weight = Linear(channels, 1, rng)


# -- checkpoint format ----------------------------------------------------------
#
# magic "MIQA" | version u32 | tensor count u32 |
#   per tensor: name-length u16, UTF-8 name, rank u8, dims u64 x rank,
#               float64 little-endian data |
# config-length u32 | UTF-8 JSON config snapshot
# All integers little-endian. Tensors are sorted by name.


def _arch_of(model) -> str:
    return "prompt-classifier" if isinstance(model, PromptClassifier) else "mediqa"


def save_checkpoint(model, path) -> None:
    params = model.named_parameters()
    snapshot = {"arch": _arch_of(model), "block": model.cfg.to_dict()}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            tensor = params[name]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.data.ndim))
            for extent in tensor.data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(tensor.data.astype("<f8").tobytes())
        config_bytes = json.dumps(snapshot, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError(f"truncated while reading {what}")
        piece = self.blob[self.pos:self.pos + n]
        self.pos += n
        return piece

    def u(self, fmt: str, what: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))[0]


def load_checkpoint(path, reset_heads: bool = False, seed: int = 0):
    """Rebuild a model from a checkpoint, verifying magic, version, and the
    full shape table. reset_heads reinitializes the quality heads (the
    pretrain-to-finetune transition); the parameter head always carries
    over."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("bad magic, not a checkpoint file")
    version = reader.u("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    count = reader.u("<I", "tensor count")
    loaded = {}
    for _ in range(count):
        name_len = reader.u("<H", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        rank = reader.u("<B", f"rank of tensor '{name}'")
        dims = tuple(reader.u("<Q", f"dims of tensor '{name}'")
                     for _ in range(rank))
        n_bytes = 8 * int(np.prod(dims, dtype=np.int64)) if dims else 8
        raw = reader.take(n_bytes, f"data of tensor '{name}'")
        loaded[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    config_len = reader.u("<I", "config length")
    snapshot = json.loads(reader.take(config_len, "config snapshot").decode("utf-8"))

    cfg = BlockConfig(**snapshot["block"])
    if snapshot["arch"] == "prompt-classifier":
        model = PromptClassifier(cfg)
    else:
        model = MedIQAModel(cfg)
    params = model.named_parameters()
    for name in sorted(params):
        if name not in loaded:
            raise CorruptCheckpointError(f"missing tensor '{name}'")
        if loaded[name].shape != params[name].data.shape:
            raise CorruptCheckpointError(
                f"shape mismatch for tensor '{name}': checkpoint has "
                f"{loaded[name].shape}, model expects {params[name].data.shape}")
    for name in sorted(loaded):
        if name not in params:
            raise CorruptCheckpointError(f"unexpected tensor '{name}'")
    for name, tensor in params.items():
        tensor.data = loaded[name].copy()
    if reset_heads:
        if not isinstance(model, MedIQAModel):
            raise ContractError("reset_heads applies only to the scoring model")
        model.reset_quality_heads(seed)
    return model
