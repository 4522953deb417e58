"""SRCC / PLCC / RMSE metrics and experiment reports.

Spearman uses fractional (average) ranks for ties and equals Pearson on
the rank vectors. Correlations on constant input are hard errors, never
silent NaN, so report tables cannot be corrupted by degenerate runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import salient
from .data import load_volume
from .errors import ContractError, UndefinedCorrelationError
from .prompt import PromptVector, auto_generate


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size < 2:
        raise ContractError(f"{name} needs at least 2 samples, got {arr.size}")
    return arr


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank positions."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.size)
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def plcc(pred, target) -> float:
    """Pearson linear correlation coefficient."""
    p = _as_vector(pred, "pred")
    t = _as_vector(target, "target")
    if p.size != t.size:
        raise ContractError(f"length mismatch: {p.size} vs {t.size}")
    dp = p - p.mean()
    dt = t - t.mean()
    sp = np.sqrt((dp * dp).sum())
    st = np.sqrt((dt * dt).sum())
    if sp == 0.0 or st == 0.0:
        raise UndefinedCorrelationError(
            "correlation undefined for constant input")
    return float((dp * dt).sum() / (sp * st))


def srcc(pred, target) -> float:
    """Spearman rank correlation: Pearson on average ranks."""
    p = _as_vector(pred, "pred")
    t = _as_vector(target, "target")
    if p.size != t.size:
        raise ContractError(f"length mismatch: {p.size} vs {t.size}")
    return plcc(average_ranks(p), average_ranks(t))


def rmse(pred, target) -> float:
    """Root mean square error."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ContractError(f"length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise ContractError("rmse needs at least one element")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class MetricReport:
    srcc: float
    plcc: float
    rmse: float
    n: int
    split: str
    flags: dict           # {"pt": bool, "pm": bool, "ss": bool}
    fingerprint: str = ""


def build_report(pred, target, split: str, flags: dict,
                 fingerprint: str = "") -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return MetricReport(srcc=srcc(pred, target), plcc=plcc(pred, target),
                        rmse=rmse(pred, target), n=int(pred.size),
                        split=split, flags=dict(flags), fingerprint=fingerprint)


def config_fingerprint(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def predict_records(model, records, root, prompts_mode: str = "manifest",
                    classifier=None, use_salient: bool = True,
                    fg_threshold: float = salient.DEFAULT_FG_THRESHOLD,
                    min_fg_ratio: float = salient.DEFAULT_MIN_FG_RATIO):
    """Model predictions and labels for a list of records, in order."""
    preds, labels = [], []
    for record in records:
        volume = load_volume(Path(root) / record.path)
        prompt = None
        if prompts_mode == "manifest":
            prompt = PromptVector(dim=record.dim, modality=record.modality,
                                  region=record.region, type=record.type)
        elif prompts_mode == "auto":
            sample = volume if record.dim == "3D" else volume.slice_at(0)
            prompt = auto_generate(sample, classifier=classifier,
                                   hints=record.prompt_hints(), mode="auto")
        if record.dim == "3D" and volume.depth > 1:
            result = model.score_3d(volume, prompt, use_salient=use_salient,
                                    fg_threshold=fg_threshold,
                                    min_fg_ratio=min_fg_ratio)
        else:
            image = salient.normalize_resize(volume.slice_at(0),
                                             model.cfg.img_size)
            result = model.score_2d(image, prompt)
        preds.append(result.overall)
        labels.append(record.label)
    return np.array(preds), np.array(labels)


def evaluate_model(model, records, root, split: str,
                   prompts_mode: str = "manifest", classifier=None,
                   flags=None, use_salient: bool = True,
                   fg_threshold: float = salient.DEFAULT_FG_THRESHOLD,
                   min_fg_ratio: float = salient.DEFAULT_MIN_FG_RATIO) -> MetricReport:
    """Score every record in one split and compute all three metrics."""
    flags = flags or {"pt": True, "pm": True, "ss": use_salient}
    subset = [r for r in records if r.split == split]
    if not subset:
        raise ContractError(f"split {split!r} is empty")
    preds, labels = predict_records(model, subset, root, prompts_mode,
                                    classifier, use_salient, fg_threshold,
                                    min_fg_ratio)
    fingerprint = config_fingerprint({
        "block": model.cfg.to_dict(), "flags": flags,
        "prompts": prompts_mode, "split": split,
    })
    return build_report(preds, labels, split, flags, fingerprint)


REPORT_COLUMNS = ("flags_pt", "flags_pm", "flags_ss", "split", "n",
                  "srcc", "plcc", "rmse")


def write_reports(path, reports) -> None:
    """Report CSV, one row per evaluated configuration."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for rep in reports:
            writer.writerow([
                "on" if rep.flags.get("pt") else "off",
                "on" if rep.flags.get("pm") else "off",
                "on" if rep.flags.get("ss") else "off",
                rep.split, rep.n,
                f"{rep.srcc:.6f}", f"{rep.plcc:.6f}", f"{rep.rmse:.6f}",
            ])


def scatter_svg(path, pred, target, title: str = "score vs label") -> None:
    """Tiny static scatter plot, no plotting dependency needed."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    size, margin = 320, 40
    span = size - 2 * margin

    def sx(v):
        return margin + v * span

    points = "\n".join(
        f'  <circle cx="{sx(t):.1f}" cy="{size - sx(p):.1f}" r="3" '
        f'fill="steelblue" fill-opacity="0.7"/>'
        for p, t in zip(np.clip(pred, 0, 1), np.clip(target, 0, 1)))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
        f'  <rect width="{size}" height="{size}" fill="white"/>\n'
        f'  <line x1="{margin}" y1="{size - margin}" x2="{size - margin}" '
        f'y2="{size - margin}" stroke="black"/>\n'
        f'  <line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{size - margin}" stroke="black"/>\n'
        f'  <text x="{size // 2}" y="20" text-anchor="middle" '
        f'font-size="12">{title}</text>\n'
        f'{points}\n'
        f'</svg>\n')
    Path(path).write_text(svg)
