"""Loss terms of the training objective, evaluated on mixed batches.

total = l_c + l_d + lambda1 * (l_r_source + l_r_target) + lambda2 * l_a

All terms are built on the autodiff tape so gradients flow end to end,
including through the adjacency construction and the propagation-matrix
solve. Plain numpy wrappers of the propagation pieces are provided for
direct testing against the tape path.
"""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .exceptions import ContractError, PropagationError, SingularMatrixError
from .model import (ModelParams, param_tensors, tape_forward_c,
                    tape_forward_d_logits, tape_forward_ga, tape_forward_gz)
from .numkernel import check_finite, inv_small, pairwise_sq_dist, variance

SIGMA2_FLOOR = 1e-12
DEGREE_FLOOR = 1e-12
BCE_EPS = 1e-7
DIST_SQ_FLOOR = 1e-24


@dataclass
class ZPrototypes:
    """Per-class mean of target z-features under pseudo labels; classes with
    no members are flagged absent."""
    means: np.ndarray    # n_classes x 512
    present: np.ndarray  # n_classes bools


@dataclass
class BatchLossReport:
    l_c: float
    l_d: float
    l_r_source: float
    l_r_target: float
    l_a: float
    lambda1: float
    lambda2: float
    total: float


@dataclass
class ObjectiveConfig:
    lambda1: float = 1e-4
    lambda2: float = 0.1
    beta: float = 0.2
    use_lr: bool = True
    use_ld: bool = True
    use_prop: bool = True
    use_fusion: bool = True


@dataclass
class TrainBatch:
    """One mixed mini-batch. Either domain part may be empty."""
    xs: np.ndarray            # ns x d_x
    ys: np.ndarray            # ns ints in [0, k_s)
    src_attrs: np.ndarray     # ns x d_a (ground-truth rows)
    xt: np.ndarray            # nt x d_x
    t_pseudo: np.ndarray      # nt ints in [0, k_s + k)
    t_seen_mask: np.ndarray   # nt bools
    t_pseudo_attrs: np.ndarray  # nt x d_a, valid where seen


def compute_z_prototypes(z_t, pseudo, n_classes) -> ZPrototypes:
    z_t = np.asarray(z_t, dtype=np.float64)
    pseudo = np.asarray(pseudo)
    if pseudo.size and (pseudo.min() < 0 or pseudo.max() >= n_classes):
        raise ContractError("pseudo label out of range")
    means = np.zeros((n_classes, z_t.shape[1]))
    present = np.zeros(n_classes, dtype=bool)
    for c in range(n_classes):
        members = z_t[pseudo == c]
        if members.shape[0] > 0:
            means[c] = members.mean(axis=0)
            present[c] = True
    return ZPrototypes(means=means, present=present)


# ---------------------------------------------------------------------------
# attribute propagation, tape path

def _pairwise_sq_t(z):
    r = ad.tsum(ad.square(z), axis=1, keepdims=True)
    d2 = ad.clip_min(r + ad.transpose(r) - 2.0 * (z @ ad.transpose(z)), 0.0)
    return 0.5 * (d2 + ad.transpose(d2))


def build_adjacency_t(z):
    """A_ij = exp(-d_ij^2 / sigma^2) with zero diagonal; sigma^2 is the
    population variance of the off-diagonal squared distances, floored."""
    n = z.shape[0]
    if n < 2:
        raise ContractError("adjacency needs at least 2 samples")
    d2 = _pairwise_sq_t(z)
    off = 1.0 - np.eye(n)
    cnt = float(n * (n - 1))
    mean = ad.tsum(d2 * off) / cnt
    var = ad.tsum(off * ad.square(d2 - mean)) / cnt
    sigma2 = ad.clip_min(var, SIGMA2_FLOOR)
    adj = ad.exp(-(d2 / sigma2)) * off
    return adj, sigma2


def propagation_matrix_t(adj, beta):
    n = adj.shape[0]
    deg = ad.clip_min(ad.tsum(adj, axis=1, keepdims=True), DEGREE_FLOOR)
    dinv = 1.0 / ad.sqrt(deg)
    lap = adj * (dinv @ ad.transpose(dinv))
    try:
        return ad.inverse(np.eye(n) - beta * lap)
    except SingularMatrixError as err:
        raise PropagationError(f"propagation system singular: {err}") from None


def propagate_attributes_t(w, raw):
    return ad.clip(w @ raw, BCE_EPS, 1.0 - BCE_EPS)


# ---------------------------------------------------------------------------
# attribute propagation, plain wrappers

def build_adjacency(z):
    z = check_finite(z, "z")
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError("adjacency needs at least 2 samples")
    d2 = pairwise_sq_dist(z)
    off = ~np.eye(z.shape[0], dtype=bool)
    sigma2 = max(variance(d2[off]), SIGMA2_FLOOR)
    adj = np.exp(-d2 / sigma2)
    np.fill_diagonal(adj, 0.0)
    return adj, sigma2


def propagation_matrix(adj, beta):
    adj = check_finite(adj, "adjacency")
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ContractError("adjacency must be square")
    if not np.allclose(adj, adj.T) or np.abs(np.diag(adj)).max(initial=0.0) != 0.0:
        raise ContractError("adjacency must be symmetric with zero diagonal")
    if adj.min(initial=0.0) < 0.0:
        raise ContractError("adjacency must be non-negative")
    deg = np.maximum(adj.sum(axis=1), DEGREE_FLOOR)
    dinv = 1.0 / np.sqrt(deg)
    lap = adj * np.outer(dinv, dinv)
    try:
        return inv_small(np.eye(adj.shape[0]) - beta * lap)
    except SingularMatrixError as err:
        raise PropagationError(f"propagation system singular: {err}") from None


def propagate_attributes(w, raw):
    w = check_finite(w, "W")
    raw = check_finite(raw, "raw attributes")
    return np.clip(w @ raw, BCE_EPS, 1.0 - BCE_EPS)


# ---------------------------------------------------------------------------
# loss terms

def _dists_to_protos_t(z, protos):
    rz = ad.tsum(ad.square(z), axis=1, keepdims=True)
    rr = (protos * protos).sum(axis=1)[None, :]
    d2 = ad.clip_min(rz + rr - 2.0 * (z @ ad.ensure(protos.T)), DIST_SQ_FLOOR)
    return ad.sqrt(d2)


def loss_alignment_one_t(z, labels, rz: ZPrototypes):
    """Pull each sample toward its own z-prototype, push from the others
    (Euclidean distances, push normalized by present-count - 1)."""
    n = z.shape[0]
    if n == 0:
        return ad.Tensor(0.0)
    cols = np.flatnonzero(rz.present)
    if cols.size < 2:
        warnings.warn("fewer than 2 present z-prototypes; alignment loss is 0",
                      stacklevel=2)
        return ad.Tensor(0.0)
    protos = rz.means[cols]
    col_of = {int(c): i for i, c in enumerate(cols)}
    labels = np.asarray(labels)
    onehot = np.zeros((n, cols.size))
    for i, lab in enumerate(labels):
        j = col_of.get(int(lab))
        if j is not None:
            onehot[i, j] = 1.0
    denom = np.maximum(cols.size - onehot.sum(axis=1), 1.0)[:, None]
    push_w = (1.0 - onehot) / denom
    dists = _dists_to_protos_t(z, protos)
    return (ad.tsum(dists * onehot) - ad.tsum(dists * push_w)) / float(n)


def loss_attribute_t(ahat_rows, targets):
    """Mean (over samples and dimensions) binary cross-entropy; ``ahat_rows``
    must already be clamped away from {0, 1}."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        return ad.Tensor(0.0)
    bce = -(targets * ad.log(ahat_rows) + (1.0 - targets) * ad.log(1.0 - ahat_rows))
    return ad.tsum(bce) / float(targets.size)


def loss_classifier_t(logits, labels):
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size == 0:
        return ad.Tensor(0.0)
    return ad.tsum(ad.softmax_cross_entropy(logits, labels)) / float(labels.size)


loss_binary_t = loss_classifier_t  # D is a 2-logit softmax head


def total_objective(l_c, l_d, l_r_source, l_r_target, l_a, lambda1, lambda2):
    """Combine already-computed parts into the scalar objective and report."""
    total = l_c + l_d + lambda1 * (l_r_source + l_r_target) + lambda2 * l_a
    report = BatchLossReport(l_c=float(l_c), l_d=float(l_d),
                             l_r_source=float(l_r_source),
                             l_r_target=float(l_r_target), l_a=float(l_a),
                             lambda1=lambda1, lambda2=lambda2,
                             total=float(total))
    return total, report


# ---------------------------------------------------------------------------
# full batch objective

def batch_objective(params: ModelParams, batch: TrainBatch,
                    rz: Optional[ZPrototypes], cfg: ObjectiveConfig):
    """Assemble every enabled loss term for one batch on the tape.

    Returns (total Tensor, BatchLossReport, param tensors, term Tensors);
    the last maps {"l_c", "l_d", "l_r", "l_a"} to unweighted loss nodes so
    individual terms can be differentiated in isolation.
    """
    pt = param_tensors(params)
    ns = batch.xs.shape[0]
    nt = batch.xt.shape[0]
    n = ns + nt
    if n == 0:
        raise ContractError("empty batch")
    d_a = params.d_a
    k_s = params.k_s

    d_x = params.d_x
    x_all = np.vstack([np.asarray(batch.xs, dtype=np.float64).reshape(ns, d_x),
                       np.asarray(batch.xt, dtype=np.float64).reshape(nt, d_x)])
    z = tape_forward_gz(pt, ad.Tensor(x_all))
    raw = tape_forward_ga(pt, z)
    if cfg.use_prop and n >= 2:
        adj, _ = build_adjacency_t(z)
        w = propagation_matrix_t(adj, cfg.beta)
        ahat = propagate_attributes_t(w, raw)
    else:
        ahat = ad.clip(raw, BCE_EPS, 1.0 - BCE_EPS)

    def joint(z_rows, attrs, n_rows):
        if not cfg.use_fusion:
            attrs = np.zeros((n_rows, d_a))
        return ad.concat([z_rows, ad.ensure(attrs)], axis=1)

    seen_idx = np.flatnonzero(batch.t_seen_mask)
    unseen_idx = np.flatnonzero(~batch.t_seen_mask)

    zs = ad.gather_rows(z, np.arange(ns)) if ns else None
    zt_seen = ad.gather_rows(z, ns + seen_idx) if seen_idx.size else None
    zt_unseen = ad.gather_rows(z, ns + unseen_idx) if unseen_idx.size else None
    ahat_s = ad.gather_rows(ahat, np.arange(ns)) if ns else None
    ahat_seen = ad.gather_rows(ahat, ns + seen_idx) if seen_idx.size else None
    ahat_unseen = ad.gather_rows(ahat, ns + unseen_idx) if unseen_idx.size else None

    # classifier C: every member of each sample's joint-feature set contributes
    c_feats, c_labels = [], []
    if ns:
        c_feats += [joint(zs, batch.src_attrs, ns), joint(zs, ahat_s, ns)]
        c_labels += [batch.ys, batch.ys]
    if seen_idx.size:
        pseudo_seen = batch.t_pseudo[seen_idx]
        c_feats += [joint(zt_seen, batch.t_pseudo_attrs[seen_idx], seen_idx.size),
                    joint(zt_seen, ahat_seen, seen_idx.size)]
        c_labels += [pseudo_seen, pseudo_seen]
    if unseen_idx.size:
        c_feats.append(joint(zt_unseen, ahat_unseen, unseen_idx.size))
        c_labels.append(np.full(unseen_idx.size, k_s))
    l_c = loss_classifier_t(tape_forward_c(pt, ad.concat(c_feats, axis=0)),
                            np.concatenate(c_labels))

    # binary head D over target joint features only
    if cfg.use_ld and nt:
        d_feats, d_labels = [], []
        if seen_idx.size:
            d_feats += [joint(zt_seen, batch.t_pseudo_attrs[seen_idx], seen_idx.size),
                        joint(zt_seen, ahat_seen, seen_idx.size)]
            d_labels += [np.zeros(seen_idx.size), np.zeros(seen_idx.size)]
        if unseen_idx.size:
            d_feats.append(joint(zt_unseen, ahat_unseen, unseen_idx.size))
            d_labels.append(np.ones(unseen_idx.size))
        l_d = loss_binary_t(tape_forward_d_logits(pt, ad.concat(d_feats, axis=0)),
                            np.concatenate(d_labels))
    else:
        l_d = ad.Tensor(0.0)

    # structure-preserving partial alignment
    if cfg.use_lr and rz is not None:
        l_rs = loss_alignment_one_t(zs, batch.ys, rz) if ns else ad.Tensor(0.0)
        zt_all = ad.gather_rows(z, ns + np.arange(nt)) if nt else None
        l_rt = (loss_alignment_one_t(zt_all, batch.t_pseudo, rz)
                if nt else ad.Tensor(0.0))
    else:
        l_rs = ad.Tensor(0.0)
        l_rt = ad.Tensor(0.0)

    # attribute BCE over source + pseudo-seen target
    a_rows, a_targets = [], []
    if ns:
        a_rows.append(ahat_s)
        a_targets.append(batch.src_attrs)
    if seen_idx.size:
        a_rows.append(ahat_seen)
        a_targets.append(batch.t_pseudo_attrs[seen_idx])
    if a_rows:
        l_a = loss_attribute_t(ad.concat(a_rows, axis=0), np.vstack(a_targets))
    else:
        l_a = ad.Tensor(0.0)

    total = (l_c + l_d + cfg.lambda1 * (l_rs + l_rt) + cfg.lambda2 * l_a)
    report = BatchLossReport(l_c=l_c.item(), l_d=l_d.item(),
                             l_r_source=l_rs.item(), l_r_target=l_rt.item(),
                             l_a=l_a.item(), lambda1=cfg.lambda1,
                             lambda2=cfg.lambda2, total=total.item())
    terms = {"l_c": l_c, "l_d": l_d, "l_r": l_rs + l_rt, "l_a": l_a}
    return total, report, pt, terms


def objective_grads(params, batch, rz, cfg):
    """(value, report, grads) for one batch; grads maps layer name to array."""
    total, report, pt, _ = batch_objective(params, batch, rz, cfg)
    total.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.value))
             for name, t in pt.items()}
    return total.item(), report, grads
