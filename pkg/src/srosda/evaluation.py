"""Evaluation protocols: open-set recognition (OS / OS* / OS-diamond),
two-stage semantic recovery (S / U / H) and per-sample attribute
precision/recall. All accuracies are class-averaged; evaluation is read-only
over the model and uses raw attribute predictions (no batch propagation).
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .dataio import TargetDataset, write_kv, read_kv
from .exceptions import ContractError, FormatError, ProtocolError
from .model import ModelParams, forward_c, forward_d, forward_ga, forward_gz
from .separation import predict_all


@dataclass
class MetricsReport:
    os: float
    os_star: float
    os_diamond: float
    s: float
    u: float
    h: float
    confusion: np.ndarray  # k_t true x (k_s + 1) predicted counts
    tau: float
    epochs: int
    seed: int
    attr_pr: List[Tuple[float, float]] = field(default_factory=list)


def harmonic_mean(s, u):
    """H = 2SU / (S + U); 0 when both are 0."""
    if s + u <= 0.0:
        return 0.0
    return 2.0 * s * u / (s + u)


def attribute_pr(a_hat, a_true, threshold=0.5):
    """Per-sample precision/recall of thresholded attribute predictions.

    Vacuous cases: no predicted and no true positives -> precision 1.0; no
    predicted positives but true positives exist -> precision 0.0; no true
    positives -> recall 1.0.
    """
    a_hat = np.asarray(a_hat, dtype=np.float64).ravel()
    a_true = np.asarray(a_true).ravel()
    if a_hat.shape != a_true.shape:
        raise ContractError("attribute_pr dimension mismatch")
    pred = a_hat >= threshold
    true = a_true > 0.5
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    if tp + fp == 0:
        precision = 1.0 if tp + fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall


def _joint_features(params: ModelParams, features, use_fusion=True):
    z = forward_gz(params, features)
    a_hat = forward_ga(params, z)
    tail = a_hat if use_fusion else np.zeros_like(a_hat)
    return np.hstack([z, tail]), a_hat


def eval_openset(params: ModelParams, target: TargetDataset, use_fusion=True):
    """C's argmax over the predicted-attribute joint feature; class k_s is
    'unknown'. Returns (os, os_star, os_diamond, confusion) where the
    confusion matrix resolves all k_t true classes against k_s+1 predictions.
    """
    if target.eval_data is None:
        raise ProtocolError("open-set evaluation requires target eval labels")
    labels = target.eval_data.labels
    k_s = params.k_s
    k_t = target.eval_data.attr_table_full.shape[0]
    f, _ = _joint_features(params, target.features, use_fusion)
    pred = np.argmax(forward_c(params, f), axis=1)

    confusion = np.zeros((k_t, k_s + 1), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)

    seen_accs = []
    for c in range(k_s):
        row = confusion[c]
        total = row.sum()
        seen_accs.append(row[c] / total if total else 0.0)
    os_star = float(np.mean(seen_accs)) if seen_accs else 0.0
    unseen_total = confusion[k_s:].sum()
    unseen_correct = confusion[k_s:, k_s].sum()
    os_diamond = float(unseen_correct / unseen_total) if unseen_total else 0.0
    os_val = (k_s * os_star + os_diamond) / (k_s + 1)
    return os_val, os_star, os_diamond, confusion


def eval_semantic(params: ModelParams, target: TargetDataset, use_fusion=True):
    """Two-stage semantic recovery: D routes each sample to the seen or unseen
    attribute rows, then the raw attribute prediction is classified
    prototypically (cosine) against the routed rows. Returns (s, u, h)."""
    if target.eval_data is None:
        raise ProtocolError("semantic evaluation requires target eval labels")
    labels = target.eval_data.labels
    table = target.eval_data.attr_table_full.astype(np.float64)
    k_s = params.k_s
    k_t = table.shape[0]
    if k_t <= k_s:
        raise ProtocolError("full attribute table must cover unseen classes")
    f, a_hat = _joint_features(params, target.features, use_fusion)
    d_probs = forward_d(params, f)
    says_unseen = np.argmax(d_probs, axis=1) == 1

    pred_class = np.empty(labels.shape[0], dtype=np.int64)
    seen_rows = np.flatnonzero(~says_unseen)
    unseen_rows = np.flatnonzero(says_unseen)
    if seen_rows.size:
        lab, _, _ = predict_all(a_hat[seen_rows], table[:k_s])
        pred_class[seen_rows] = lab
    if unseen_rows.size:
        lab, _, _ = predict_all(a_hat[unseen_rows], table[k_s:])
        pred_class[unseen_rows] = lab + k_s

    def class_avg(classes):
        accs = []
        for c in classes:
            mask = labels == c
            if mask.any():
                accs.append(float(np.mean(pred_class[mask] == c)))
        return float(np.mean(accs)) if accs else 0.0

    s = class_avg(range(k_s))
    u = class_avg(range(k_s, k_t))
    return s, u, harmonic_mean(s, u)


def attribute_pr_all(params: ModelParams, target: TargetDataset, threshold=0.5):
    if target.eval_data is None:
        raise ProtocolError("attribute evaluation requires target eval data")
    z = forward_gz(params, target.features)
    a_hat = forward_ga(params, z)
    table = target.eval_data.attr_table_full
    return [attribute_pr(a_hat[i], table[target.eval_data.labels[i]], threshold)
            for i in range(a_hat.shape[0])]


def compute_report(params: ModelParams, target: TargetDataset, tau, epochs,
                   seed, use_fusion=True, with_attr_pr=True) -> MetricsReport:
    os_val, os_star, os_diamond, confusion = eval_openset(params, target,
                                                          use_fusion)
    s, u, h = eval_semantic(params, target, use_fusion)
    attr_pr = attribute_pr_all(params, target) if with_attr_pr else []
    return MetricsReport(os=os_val, os_star=os_star, os_diamond=os_diamond,
                         s=s, u=u, h=h, confusion=confusion, tau=float(tau),
                         epochs=int(epochs), seed=int(seed), attr_pr=attr_pr)


# ---------------------------------------------------------------------------
# report file

def save_report(report: MetricsReport, path):
    if report.confusion.size == 0:
        raise ContractError("report has an empty confusion matrix")
    pairs = [
        ("os", repr(float(report.os))),
        ("os_star", repr(float(report.os_star))),
        ("os_diamond", repr(float(report.os_diamond))),
        ("s", repr(float(report.s))),
        ("u", repr(float(report.u))),
        ("h", repr(float(report.h))),
        ("tau", repr(float(report.tau))),
        ("epochs", int(report.epochs)),
        ("seed", int(report.seed)),
        ("confusion.rows", report.confusion.shape[0]),
        ("confusion.cols", report.confusion.shape[1]),
    ]
    for t in range(report.confusion.shape[0]):
        for p in range(report.confusion.shape[1]):
            pairs.append((f"confusion.{t}.{p}", int(report.confusion[t, p])))
    for i, (prec, rec) in enumerate(report.attr_pr):
        pairs.append((f"attr_pr.{i}", f"{float(prec)!r},{float(rec)!r}"))
    write_kv(pairs, path)


def load_report(path) -> MetricsReport:
    values = dict(read_kv(path))
    try:
        rows = int(values["confusion.rows"])
        cols = int(values["confusion.cols"])
        confusion = np.zeros((rows, cols), dtype=np.int64)
        for t in range(rows):
            for p in range(cols):
                confusion[t, p] = int(values[f"confusion.{t}.{p}"])
        attr_pr = []
        i = 0
        while f"attr_pr.{i}" in values:
            prec, rec = values[f"attr_pr.{i}"].split(",")
            attr_pr.append((float(prec), float(rec)))
            i += 1
        return MetricsReport(os=float(values["os"]),
                             os_star=float(values["os_star"]),
                             os_diamond=float(values["os_diamond"]),
                             s=float(values["s"]), u=float(values["u"]),
                             h=float(values["h"]), confusion=confusion,
                             tau=float(values["tau"]),
                             epochs=int(values["epochs"]),
                             seed=int(values["seed"]), attr_pr=attr_pr)
    except KeyError as err:
        raise FormatError(f"{path}: missing report key {err}") from None
    except ValueError as err:
        raise FormatError(f"{path}: bad report value: {err}") from None
