"""Evaluation protocols and representation-similarity analysis.

Linear accuracy combines the server backbone with a client's local classifier
on that client's test split. KNN accuracy classifies backbone features of an
unseen dataset by cosine-similarity nearest neighbors. CKA measures pairwise
similarity of per-block features across clients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .model import (
    ModelConfig,
    Params,
    block_output_shapes,
    forward,
    is_classifier_key,
    is_private_key,
    recalibrate_bn_stats,
)
from .tensor import Tensor
from .topology import PartitionedAdjacency

Array = np.ndarray

_EVAL_BATCH = 256


@dataclass(frozen=True)
class EvalResult:
    protocol: str  # "linear" or "knn"
    client: str
    accuracy: float
    round: int


@dataclass(frozen=True)
class CkaMatrix:
    block: int
    values: Array  # [n_clients, n_clients]


def _batched_forward(
    params: Params, cfg: ModelConfig, parts: PartitionedAdjacency, x: Array
) -> tuple[Array, Array | None, list[Array]]:
    """Eval-mode features, logits, and per-block outputs over a dataset."""
    feats, logits, blocks = [], [], [[] for _ in range(cfg.num_blocks)]
    has_classifier = any(is_classifier_key(k) for k in params)
    for start in range(0, x.shape[0], _EVAL_BATCH):
        trace = forward(params, cfg, parts, Tensor(x[start : start + _EVAL_BATCH]), training=False)
        feats.append(trace.h.data)
        if has_classifier:
            logits.append(trace.logits.data)
        for b, out in enumerate(trace.block_outputs):
            blocks[b].append(out.data)
    return (
        np.concatenate(feats),
        np.concatenate(logits) if has_classifier else None,
        [np.concatenate(b) for b in blocks],
    )


def extract_features(
    params: Params, cfg: ModelConfig, parts: PartitionedAdjacency, x: Array
) -> Array:
    return _batched_forward(params, cfg, parts, x)[0]


def _with_calibrated_stats(
    composed: Params, cfg: ModelConfig, parts: PartitionedAdjacency, calibration_x: Array
) -> Params:
    """Copy of `composed` whose BN running stats are recomputed on a reference
    batch. The originals are cloned first so calibration never leaks back into
    the federation state."""
    calibrated = dict(composed)
    for key, value in composed.items():
        if key.endswith((".running_mean", ".running_var")):
            calibrated[key] = Tensor(value.data.copy())
    recalibrate_bn_stats(calibrated, cfg, parts, calibration_x)
    return calibrated


def linear_accuracy(
    server_backbone: Params,
    client_params: Params,
    cfg: ModelConfig,
    parts: PartitionedAdjacency,
    test_x: Array,
    test_labels: Array,
    client: str,
    round_idx: int = 0,
    calibration_x: Array | None = None,
) -> EvalResult:
    """Top-1 accuracy of the central backbone with a client's local head.

    The composed model takes every shared weight from the server and the
    private parameters (classifier, plus any client-kept topology) from the
    client, matching the model a client actually serves after broadcast.
    test_labels are local class indices aligned with the classifier output.
    When calibration_x is given, BN running stats are recomputed on it (a
    client's train split) before measuring, so normalization reflects the
    composed weights rather than a stale average.
    """
    composed = dict(server_backbone)
    composed.update({k: v for k, v in client_params.items() if is_private_key(k)})
    if calibration_x is not None:
        composed = _with_calibrated_stats(composed, cfg, parts, calibration_x)
    _, logits, _ = _batched_forward(composed, cfg, parts, test_x)
    pred = logits.argmax(axis=1)
    acc = float((pred == np.asarray(test_labels)).mean())
    return EvalResult(protocol="linear", client=client, accuracy=acc, round=round_idx)


def knn_classify(
    train_feats: Array, train_labels: Array, test_feats: Array, k: int
) -> Array:
    """Cosine-similarity k-NN with deterministic tie-breaking.

    Majority vote among the k nearest; ties broken by smallest summed cosine
    distance within the tied classes, then by lowest class id.
    """
    if train_feats.shape[0] == 0:
        raise UsageError("knn: empty train split")
    if k < 1:
        raise UsageError(f"knn: k must be >= 1, got {k}")
    k = min(k, train_feats.shape[0])

    def _norm(a: Array) -> Array:
        a = a.astype(np.float64)
        n = np.linalg.norm(a, axis=1, keepdims=True)
        return a / np.maximum(n, 1e-12)

    sim = _norm(test_feats) @ _norm(train_feats).T
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    preds = np.empty(test_feats.shape[0], dtype=np.int64)
    train_labels = np.asarray(train_labels)
    for i in range(test_feats.shape[0]):
        neigh = order[i]
        labels = train_labels[neigh]
        dists = 1.0 - sim[i, neigh]
        best_label, best_key = None, None
        for cls in np.unique(labels):
            mask = labels == cls
            # Higher count wins; then smaller summed distance; then lower id.
            key = (-int(mask.sum()), float(dists[mask].sum()), int(cls))
            if best_key is None or key < best_key:
                best_key, best_label = key, int(cls)
        preds[i] = best_label
    return preds


def knn_accuracy(
    backbone: Params,
    cfg: ModelConfig,
    parts: PartitionedAdjacency,
    train_x: Array,
    train_labels: Array,
    test_x: Array,
    test_labels: Array,
    k: int = 1,
    client: str = "unseen",
    round_idx: int = 0,
    calibrate: bool = True,
) -> EvalResult:
    if calibrate:
        backbone = _with_calibrated_stats(backbone, cfg, parts, train_x)
    train_feats = extract_features(backbone, cfg, parts, train_x)
    test_feats = extract_features(backbone, cfg, parts, test_x)
    preds = knn_classify(train_feats, train_labels, test_feats, k)
    acc = float((preds == np.asarray(test_labels)).mean())
    return EvalResult(protocol="knn", client=client, accuracy=acc, round=round_idx)


def cka(features_a: Array, features_b: Array) -> float:
    """Linear CKA between two feature matrices with matched rows.

    Columns are centered; the score is ||B^T A||_F^2 / (||A^T A||_F ||B^T B||_F),
    defined as 0 when either norm vanishes.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise UsageError(f"cka: incompatible shapes {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise UsageError("cka: need at least 2 samples")
    a = a - a.mean(axis=0, keepdims=True)
    b = b - b.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(b.T @ a, ord="fro") ** 2
    norm_a = np.linalg.norm(a.T @ a, ord="fro")
    norm_b = np.linalg.norm(b.T @ b, ord="fro")
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return float(cross / (norm_a * norm_b))


def block_cka_report(
    client_params: list[Params],
    cfg: ModelConfig,
    parts: PartitionedAdjacency,
    probe_x: Array,
) -> list[CkaMatrix]:
    """Pairwise CKA of flattened per-sample block outputs across clients."""
    per_client_blocks = [
        _batched_forward(p, cfg, parts, probe_x)[2] for p in client_params
    ]
    n = len(client_params)
    report = []
    for b in range(cfg.num_blocks):
        flat = [blocks[b].reshape(probe_x.shape[0], -1) for blocks in per_client_blocks]
        mat = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                mat[i, j] = mat[j, i] = cka(flat[i], flat[j])
        report.append(CkaMatrix(block=b, values=mat))
    return report


def mean_off_diagonal(matrix: Array) -> float:
    n = matrix.shape[0]
    if n < 2:
        return 1.0
    mask = ~np.eye(n, dtype=bool)
    return float(matrix[mask].mean())
