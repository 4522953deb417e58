"""Two-stage training: physical-parameter regression, then expert scores.

Both stages run the same loop (Adam, MSE, batch size 1 by default) and
differ only in data and prediction target. The best checkpoint is the one
with the lowest validation loss, ties broken by the earlier epoch. Module
ablation flags: PT off means no pretrained initialization (handled by the
caller), PM off zeroes and freezes the prompt injections, SS off scores
3D volumes from their center slice only.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import numcore as nc
from . import salient
from .data import load_volume
from .errors import ContractError, NumericError
from .model import MedIQAModel, save_checkpoint
from .numcore import Tensor
from .prompt import PromptVector, auto_generate
from .seeding import substream


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 1
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    stage: str = "finetune"          # "pretrain" or "finetune"
    pt: bool = True                  # pretrained initialization
    pm: bool = True                  # prompt injection
    ss: bool = True                  # salient slice selection for 3D
    grad_clip: float = 10.0          # global-norm clip; tamed by batch size 1
    freeze_encoder: bool = False
    prompts: str = "manifest"        # "auto" | "manifest" | "off"

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        return self


@dataclass
class TrainResult:
    checkpoint_path: Path
    curve_path: Path
    best_epoch: int
    best_val: float
    history: list = field(default_factory=list)  # (epoch, train_mse, val_mse)


def mse_loss(pred: Tensor, target) -> Tensor:
    """(1/n) * sum((pred - target)^2), differentiable in pred."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(
            f"mse_loss length mismatch: {pred.shape} vs {target.shape}")
    if target.size < 1:
        raise ContractError("mse_loss needs at least one element")
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def cross_entropy(logits: Tensor, target_index: int) -> Tensor:
    """Negative log-likelihood of the target class; logits shaped (1, k)."""
    logp = nc.softmax(logits, axis=-1).log()
    onehot = np.zeros(logits.shape)
    onehot[0, target_index] = 1.0
    return -(logp * Tensor(onehot)).sum()


class Adam:
    """Standard Adam with bias correction, deterministic given its inputs."""

    def __init__(self, params: dict, lr: float = 1e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                grad = np.zeros_like(p.data)
            elif not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient for tensor '{name}'")
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * grad
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * (grad * grad)
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = p.data - self.lr * update


def clip_global_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- sample preparation ------------------------------------------------------------


@dataclass
class PreparedSample:
    stack: np.ndarray             # (n_slices, 1, S, S), n_slices == 1 for 2D
    label: float
    encoded_prompt: Optional[np.ndarray]
    is_3d: bool


def _encoded_for(record, volume, model_cfg, prompts_mode: str, classifier):
    if prompts_mode == "off":
        return None
    if prompts_mode == "manifest":
        return PromptVector(dim=record.dim, modality=record.modality,
                            region=record.region, type=record.type).encoded()
    sample = volume if record.dim == "3D" else volume.slice_at(0)
    return auto_generate(sample, classifier=classifier,
                         hints=record.prompt_hints(), mode="auto").encoded()


def prepare_samples(records, root, model_cfg, prompts_mode: str = "manifest",
                    classifier=None, use_salient: bool = True,
                    fg_threshold: float = salient.DEFAULT_FG_THRESHOLD,
                    min_fg_ratio: float = salient.DEFAULT_MIN_FG_RATIO) -> list:
    """Load, preprocess, and prompt-encode records once; training loops then
    iterate over in-memory arrays."""
    prepared = []
    for record in records:
        volume = load_volume(Path(root) / record.path)
        encoded = _encoded_for(record, volume, model_cfg, prompts_mode, classifier)
        if record.dim == "3D" and volume.depth > 1:
            if use_salient:
                sel = salient.select_slices(volume, model_cfg.img_size,
                                            fg_threshold, min_fg_ratio)
            else:
                sel = salient.center_slice(volume, model_cfg.img_size)
            stack = sel.slices[:, None]
            is_3d = True
        else:
            img = salient.normalize_resize(volume.slice_at(0), model_cfg.img_size)
            stack = img[None, None]
            is_3d = False
        prepared.append(PreparedSample(stack=stack, label=record.label,
                                       encoded_prompt=encoded, is_3d=is_3d))
    return prepared


# -- prediction targets -------------------------------------------------------------


def _score_prediction(model: MedIQAModel, sample: PreparedSample) -> Tensor:
    stack = Tensor(sample.stack)
    if sample.is_3d:
        overall, _, _ = model.slice_scores_t(stack, sample.encoded_prompt)
        return overall.reshape(1)
    q, _, _ = model.patch_q_t(stack, sample.encoded_prompt)
    return q


def _param_prediction(model: MedIQAModel, sample: PreparedSample) -> Tensor:
    return model.predict_params_t(Tensor(sample.stack), sample.encoded_prompt)


def _sample_loss(model, sample, predict_fn) -> Tensor:
    pred = predict_fn(model, sample)
    target = np.full(pred.shape, sample.label)
    return mse_loss(pred, target)


# -- the shared loop -----------------------------------------------------------------


def _write_curve(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "mse"])
        for epoch, train_mse, val_mse in history:
            writer.writerow([epoch, "train", f"{train_mse:.10f}"])
            writer.writerow([epoch, "val", f"{val_mse:.10f}"])


def run_training(model: MedIQAModel, train_samples, val_samples,
                 cfg: TrainConfig, out_dir, predict_fn, tag: str) -> TrainResult:
    cfg.validate()
    if not train_samples:
        raise ContractError("training split is empty")
    if not val_samples:
        raise ContractError("validation split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    trainable = model.named_parameters()
    if not cfg.pm:
        for injection in model.injections:
            injection.zero_()
        trainable = {k: v for k, v in trainable.items()
                     if not k.startswith("injections")}
    if cfg.freeze_encoder:
        frozen_prefixes = ("patch_embed", "encoder_layers", "channel_attn",
                           "window_blocks")
        trainable = {k: v for k, v in trainable.items()
                     if not k.startswith(frozen_prefixes)}

    optimizer = Adam(trainable, lr=cfg.learning_rate, beta1=cfg.beta1,
                     beta2=cfg.beta2, eps=cfg.adam_eps)
    shuffle_rng = substream(cfg.seed, "shuffle", tag)
    ckpt_path = out_dir / f"{tag}_best.ckpt"
    curve_path = out_dir / f"{tag}_loss.csv"

    history = []
    best_val, best_epoch = float("inf"), -1
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            losses = [_sample_loss(model, train_samples[i], predict_fn)
                      for i in batch]
            loss = losses[0] if len(losses) == 1 else \
                functools.reduce(lambda a, b: a + b, losses) * (1.0 / len(losses))
            loss.backward()
            clip_global_norm(trainable, cfg.grad_clip)
            optimizer.step()
            epoch_losses.append(float(loss.data))
        train_mse = float(np.mean(epoch_losses))
        val_mse = float(np.mean([
            float(_sample_loss(model, s, predict_fn).data) for s in val_samples]))
        history.append((epoch, train_mse, val_mse))
        if val_mse < best_val:
            best_val, best_epoch = val_mse, epoch
            save_checkpoint(model, ckpt_path)
    _write_curve(curve_path, history)
    return TrainResult(checkpoint_path=ckpt_path, curve_path=curve_path,
                       best_epoch=best_epoch, best_val=best_val, history=history)


def pretrain(model: MedIQAModel, records, root, cfg: TrainConfig,
             out_dir, classifier=None,
             fg_threshold: float = salient.DEFAULT_FG_THRESHOLD,
             min_fg_ratio: float = salient.DEFAULT_MIN_FG_RATIO) -> TrainResult:
    """Upstream stage: regress normalized physical parameters."""
    bad = [r for r in records if r.label_kind != "physical"]
    if bad:
        raise ContractError(
            f"pretraining requires label_kind=physical, found {bad[0].label_kind!r}")
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    train_samples = prepare_samples(train_recs, root, model.cfg, cfg.prompts,
                                    classifier, cfg.ss, fg_threshold,
                                    min_fg_ratio)
    val_samples = prepare_samples(val_recs, root, model.cfg, cfg.prompts,
                                  classifier, cfg.ss, fg_threshold,
                                  min_fg_ratio)
    return run_training(model, train_samples, val_samples, cfg, out_dir,
                        _param_prediction, tag="pretrain")


def finetune(model: MedIQAModel, records, root, cfg: TrainConfig,
             out_dir, classifier=None,
             fg_threshold: float = salient.DEFAULT_FG_THRESHOLD,
             min_fg_ratio: float = salient.DEFAULT_MIN_FG_RATIO) -> TrainResult:
    """Downstream stage: regress expert quality scores through the scoring
    path (per-sample dimensionality picks the 2D or 3D route)."""
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    prompts_mode = "off" if not cfg.pm else cfg.prompts
    train_samples = prepare_samples(train_recs, root, model.cfg, prompts_mode,
                                    classifier, cfg.ss, fg_threshold,
                                    min_fg_ratio)
    val_samples = prepare_samples(val_recs, root, model.cfg, prompts_mode,
                                  classifier, cfg.ss, fg_threshold,
                                  min_fg_ratio)
    return run_training(model, train_samples, val_samples, cfg, out_dir,
                        _score_prediction, tag="finetune")


# -- classifier training ----------------------------------------------------------------


def train_classifier(classifier, records, root, cfg: TrainConfig,
                     out_dir) -> TrainResult:
    """Fit the prompt classifier with summed cross-entropy over its three
    heads; the best checkpoint minimizes validation loss."""
    from .blocks import PromptClassifier  # for type clarity only
    from .prompt import MODALITIES, REGIONS, TYPES

    assert isinstance(classifier, PromptClassifier)
    vocabs = {"modality": MODALITIES, "region": REGIONS, "type": TYPES}

    def targets_of(record):
        return {task: vocab.index(getattr(record, task))
                for task, vocab in vocabs.items()}

    def load_image(record):
        volume = load_volume(Path(root) / record.path)
        img = salient.normalize_resize(volume.slice_at(volume.depth // 2),
                                       classifier.cfg.img_size)
        return img[None, None]

    split_data = {}
    for name in ("train", "val"):
        recs = [r for r in records if r.split == name]
        if not recs:
            raise ContractError(f"{name} split is empty")
        split_data[name] = [(load_image(r), targets_of(r)) for r in recs]

    def batch_loss(image, targets):
        logits = classifier(Tensor(image))
        losses = [cross_entropy(logits[task], idx)
                  for task, idx in targets.items()]
        return functools.reduce(lambda a, b: a + b, losses)

    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = classifier.named_parameters()
    optimizer = Adam(params, lr=cfg.learning_rate, beta1=cfg.beta1,
                     beta2=cfg.beta2, eps=cfg.adam_eps)
    shuffle_rng = substream(cfg.seed, "shuffle", "classifier")
    ckpt_path = out_dir / "classifier_best.ckpt"
    curve_path = out_dir / "classifier_loss.csv"

    history = []
    best_val, best_epoch = float("inf"), -1
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(split_data["train"]))
        epoch_losses = []
        for i in order:
            image, targets = split_data["train"][i]
            optimizer.zero_grad()
            loss = batch_loss(image, targets)
            loss.backward()
            clip_global_norm(params, cfg.grad_clip)
            optimizer.step()
            epoch_losses.append(float(loss.data))
        val_mse = float(np.mean([
            float(batch_loss(img, tgt).data) for img, tgt in split_data["val"]]))
        history.append((epoch, float(np.mean(epoch_losses)), val_mse))
        if val_mse < best_val:
            best_val, best_epoch = val_mse, epoch
            save_checkpoint(classifier, ckpt_path)
    _write_curve(curve_path, history)
    return TrainResult(checkpoint_path=ckpt_path, curve_path=curve_path,
                       best_epoch=best_epoch, best_val=best_val, history=history)


def classifier_accuracy(classifier, records, root, task: str = "modality") -> float:
    """Fraction of records whose argmax matches the manifest field."""
    from .prompt import MODALITIES, REGIONS, TYPES
    vocab = {"modality": MODALITIES, "region": REGIONS, "type": TYPES}[task]
    hits = 0
    for record in records:
        volume = load_volume(Path(root) / record.path)
        img = salient.normalize_resize(volume.slice_at(volume.depth // 2),
                                       classifier.cfg.img_size)
        probs = classifier.classify(img)
        if vocab[int(np.argmax(probs[task]))] == getattr(record, task):
            hits += 1
    return hits / len(records)
