"""Attention-distance profiles, attention rollout, embedding export and run metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

METRIC_FIELDS = ("batch_idx", "n_samples", "n_selected_pass1", "n_selected_pass2", "loss",
                 "mean_entropy", "batch_accuracy", "running_accuracy", "skipped")


@dataclass
class TokenGeometry:
    grid: int
    patch_size: int

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def centers(self) -> np.ndarray:
        """[N, 2] pixel (row, col) centres in row-major patch order."""
        idx = np.arange(self.num_patches)
        return np.stack([(idx // self.grid + 0.5) * self.patch_size,
                         (idx % self.grid + 0.5) * self.patch_size], axis=1).astype(np.float64)

    @property
    def distances(self) -> np.ndarray:
        c = self.centers
        return np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1))


def patch_weights(weights: np.ndarray, has_conditioner: bool = True) -> np.ndarray:
    """Keep patch rows/columns only (drop class token and conditioner), renormalise rows."""
    w = np.asarray(weights, dtype=np.float64)
    if has_conditioner:
        w = w[..., :-1, :-1]
    w = w[..., 1:, 1:]
    return w / w.sum(axis=-1, keepdims=True)


def attention_distance(weights: np.ndarray, geom: TokenGeometry, has_conditioner: bool = True,
                       mean_over_queries: bool = True) -> np.ndarray:
    """Attention-weighted pixel distance over patch tokens, for each leading index.

    ``weights`` is [..., m, m] with the class token at index 0 (and the
    conditioner last when ``has_conditioner``). By default the double sum is
    divided by the number of patch queries; ``mean_over_queries=False`` gives
    the raw double sum.
    """
    w = patch_weights(weights, has_conditioner)
    if w.shape[-1] != geom.num_patches:
        raise ValueError(f"record has {w.shape[-1]} patch tokens, geometry has {geom.num_patches}")
    total = (w * geom.distances).sum(axis=(-1, -2))
    return total / geom.num_patches if mean_over_queries else total


@dataclass
class AttentionProfile:
    per_head: np.ndarray  # [L, heads] mean distance in pixels

    @property
    def per_layer(self) -> np.ndarray:
        return self.per_head.mean(axis=1)


def profile(records_per_batch: Iterable[Sequence], geom: TokenGeometry,
            mean_over_queries: bool = True) -> AttentionProfile:
    """Per-layer, per-head attention distance averaged over every sample seen."""
    total = None
    count = 0
    for records in records_per_batch:
        d = np.stack([attention_distance(r.weights, geom, r.has_conditioner, mean_over_queries)
                      for r in records])  # [L, b, h]
        total = d.sum(axis=1) if total is None else total + d.sum(axis=1)
        count += d.shape[1]
    if not count:
        raise ValueError("profile needs at least one sample")
    return AttentionProfile(total / count)


def attention_rollout(layer_weights: Sequence[np.ndarray], has_conditioner: bool = True,
                      ) -> tuple[np.ndarray, bool]:
    """Class-token saliency over patches for one sample.

    ``layer_weights`` holds one [heads, m, m] array per layer. Heads are
    averaged, the conditioner row/column dropped, rows renormalised and mixed
    half-and-half with the identity before chaining layers. Returns
    (saliency summing to 1, degenerate flag); an all-zero saliency comes back
    uniform with the flag set.
    """
    rollout = None
    for w in layer_weights:
        a = np.asarray(w, dtype=np.float64).mean(axis=0)
        if has_conditioner:
            a = a[:-1, :-1]
        a = a / a.sum(axis=-1, keepdims=True)
        a = 0.5 * a + 0.5 * np.eye(a.shape[0])
        rollout = a if rollout is None else a @ rollout
    sal = rollout[0, 1:]
    total = sal.sum()
    if total <= 1e-12:
        return np.full(sal.shape, 1.0 / len(sal)), True
    return sal / total, False


def records_for_sample(records: Sequence, i: int) -> list[np.ndarray]:
    return [r.weights[i] for r in records]


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)
    total_correct: int = 0
    total_seen: int = 0

    def update(self, batch_idx: int, n_samples: int, n_sel1: int, n_sel2: int, loss: float,
               correct: int, skipped: bool, mean_entropy: float = float("nan")) -> dict:
        if self.rows and batch_idx <= self.rows[-1]["batch_idx"]:
            raise ValueError("batch index must increase")
        self.total_correct += correct
        self.total_seen += n_samples
        row = {
            "batch_idx": batch_idx,
            "n_samples": n_samples,
            "n_selected_pass1": n_sel1,
            "n_selected_pass2": n_sel2,
            "loss": loss,
            "mean_entropy": mean_entropy,
            "batch_accuracy": correct / n_samples if n_samples else float("nan"),
            "running_accuracy": self.total_correct / self.total_seen if self.total_seen else float("nan"),
            "skipped": int(bool(skipped)),
        }
        self.rows.append(row)
        return row

    @property
    def accuracy(self) -> float:
        return self.total_correct / self.total_seen if self.total_seen else float("nan")

    @property
    def skipped_batches(self) -> int:
        return int(np.sum([r["skipped"] for r in self.rows]))


def running_metrics(log: MetricsLog, **outcome) -> dict:
    return log.update(**outcome)


# -------------------------------------------------------------------- CSV

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def write_metrics(path, log: MetricsLog) -> Path:
    return write_csv(path, METRIC_FIELDS, ([r[k] for k in METRIC_FIELDS] for r in log.rows))


def embedding_rows(sample_ids, domains, labels, per_layer: Sequence[np.ndarray]):
    """Rows of (sample_id, domain, label, layer, features...) in sample-major order."""
    for i, sid in enumerate(sample_ids):
        for layer, feats in enumerate(per_layer):
            yield [int(sid), domains[i], int(labels[i]), layer] + [float(v) for v in feats[i]]


def export_embeddings(params, images: np.ndarray, labels: np.ndarray, sample_ids, domains,
                      what: str = "class_tokens", mode: str = "dct", path=None, batch_size: int = 256):
    """Per-layer class tokens or conditioners for external projection (t-SNE etc.).

    Returns the rows; writes them as CSV when ``path`` is given.
    """
    from .model import ForwardTrace, _no_grad, model_forward

    if what not in ("class_tokens", "conditioners"):
        raise ValueError(f"unknown export {what!r}")
    if what == "conditioners" and mode == "baseline":
        raise ValueError("baseline forward has no conditioners to export")
    rows = []
    with _no_grad(params):
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            trace = ForwardTrace()
            model_forward(images[sl], params, mode, trace=trace)
            feats = trace.class_tokens if what == "class_tokens" else trace.conditioners
            rows.extend(embedding_rows(np.asarray(sample_ids)[sl], list(domains[sl]), labels[sl], feats))
    if path is not None:
        width = len(rows[0]) - 4 if rows else 0
        write_csv(path, ["sample_id", "domain", "label", "layer"] + [f"f{j}" for j in range(width)], rows)
    return rows
