"""Progressive seen/unseen separation of the unlabeled target domain.

Produces pseudo labels (0..k_s-1 = seen class, k_s..k_s+k-1 = unseen
cluster), per-sample confidences, the split threshold tau and the combined
prototype set. Prototype scoring uses cosine distance; clustering uses
Euclidean distance. All tie-breaks go to the lowest index.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError, DataError, SeparationError
from .numkernel import ZERO_NORM_EPS, make_rng


@dataclass
class PrototypeSet:
    seen: np.ndarray    # k_s x d
    unseen: np.ndarray  # k x d (0 x d before clustering)

    def stacked(self):
        if self.unseen.size == 0:
            return self.seen
        return np.vstack([self.seen, self.unseen])


@dataclass
class PseudoState:
    pseudo_label: np.ndarray  # N_t ints in [0, k_s + k)
    confidence: np.ndarray    # N_t reals in (0, 1]
    tau: float
    seen_mask: np.ndarray     # N_t bools, True iff pseudo_label < k_s
    prototypes: PrototypeSet


@dataclass
class SeparationConfig:
    k: int
    alpha: float = 0.001
    rounds: int = 5
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    quantile_fallback: bool = False
    seed: int = 0


def init_prototypes(features, labels, k_s):
    """Per-class mean of source features; unseen set starts empty."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    seen = np.empty((k_s, features.shape[1]))
    for c in range(k_s):
        members = features[labels == c]
        if members.shape[0] == 0:
            raise DataError(f"class {c} has no source samples")
        seen[c] = members.mean(axis=0)
    return PrototypeSet(seen=seen, unseen=np.empty((0, features.shape[1])))


def _cosine_dist_matrix(x, protos):
    """Rows of x against rows of protos; near-zero-norm rows fall back to the
    neutral distance 1.0."""
    xn = np.linalg.norm(x, axis=1)
    pn = np.linalg.norm(protos, axis=1)
    safe_x = np.where(xn < ZERO_NORM_EPS, 1.0, xn)
    safe_p = np.where(pn < ZERO_NORM_EPS, 1.0, pn)
    cos = (x @ protos.T) / np.outer(safe_x, safe_p)
    dist = np.clip(1.0 - cos, 0.0, 2.0)
    degenerate = (xn < ZERO_NORM_EPS)[:, None] | (pn < ZERO_NORM_EPS)[None, :]
    return np.where(degenerate, 1.0, dist)


def predict_all(x, protos):
    """Prototypical prediction for each row of x against the rows of protos.

    Returns (labels, confidences, probs); probs is softmax over negative
    cosine distances, computed with max-subtraction.
    """
    x = np.asarray(x, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    if protos.ndim != 2 or protos.shape[0] < 1:
        raise ContractError("predict_all requires at least one prototype")
    if x.shape[1] != protos.shape[1]:
        raise ContractError(f"dimension mismatch: {x.shape[1]} vs {protos.shape[1]}")
    dist = _cosine_dist_matrix(x, protos)
    shifted = -(dist - dist.min(axis=1, keepdims=True))
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    labels = np.argmax(probs, axis=1)  # argmax takes the lowest index on ties
    conf = probs[np.arange(x.shape[0]), labels]
    return labels, conf, probs


def prototype_predict(x, protos):
    """Single-sample variant of predict_all."""
    labels, conf, probs = predict_all(np.asarray(x, dtype=np.float64)[None, :],
                                      np.asarray(protos, dtype=np.float64))
    return int(labels[0]), float(conf[0]), probs[0]


def split_seen_unseen(confidences):
    """tau = mean confidence; samples at or above tau are seen."""
    confidences = np.asarray(confidences, dtype=np.float64)
    if confidences.size == 0:
        raise ContractError("split_seen_unseen requires a non-empty vector")
    tau = float(confidences.sum() / confidences.size)
    return tau, confidences >= tau


def update_prototypes_ema(protos: PrototypeSet, target_feats, labels, seen_mask,
                          alpha):
    """Blend each seen prototype toward the mean of its confident target
    samples: mu <- (1 - alpha) mu + alpha * mean. Classes with no confident
    samples keep their prototype."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must be in [0, 1]")
    target_feats = np.asarray(target_feats, dtype=np.float64)
    labels = np.asarray(labels)
    new_seen = protos.seen.copy()
    for c in range(protos.seen.shape[0]):
        members = target_feats[(labels == c) & seen_mask]
        if members.shape[0] > 0:
            new_seen[c] = (1.0 - alpha) * new_seen[c] + alpha * members.mean(axis=0)
    return PrototypeSet(seen=new_seen, unseen=protos.unseen.copy())


def _kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i] = points[rng.integers(n)]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            centers[i] = points[min(idx, n - 1)]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(points, k, init="kmeans++", max_iter=100, tol=1e-6, rng=None):
    """Lloyd iterations with Euclidean distance.

    ``init`` is either the string "kmeans++" (seeded via ``rng``) or an
    explicit (k, d) center array. Assignment ties break to the lowest center
    index; an emptied cluster is reseeded to the point farthest from its
    assigned center. Inertia is asserted non-increasing across iterations.

    Returns (centers, assignment, inertia).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ContractError("kmeans requires k >= 1")
    if isinstance(init, str):
        if init != "kmeans++":
            raise ContractError(f"unknown init {init!r}")
        if k > n:
            raise ContractError(f"kmeans++ init needs k <= n, got k={k}, n={n}")
        centers = _kmeans_pp_init(points, k, rng if rng is not None else make_rng(0))
    else:
        centers = np.array(init, dtype=np.float64)
        if centers.shape != (k, points.shape[1]):
            raise ContractError("explicit centers must have shape (k, d)")

    prev_inertia = np.inf
    assignment = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assignment = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), assignment].sum())
        assert inertia <= prev_inertia + 1e-9, "kmeans inertia increased"
        prev_inertia = inertia
        new_centers = centers.copy()
        for c in range(k):
            members = points[assignment == c]
            if members.shape[0] > 0:
                new_centers[c] = members.mean(axis=0)
            else:
                farthest = int(np.argmax(d2[np.arange(n), assignment]))
                new_centers[c] = points[farthest]
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assignment = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), assignment].sum())
    return centers, assignment, inertia


def run_progressive_separation(source_feats, source_labels, k_s, target_feats,
                               cfg: SeparationConfig) -> PseudoState:
    """Full separation procedure in a given feature space.

    1. source class means as seen prototypes;
    2. ``cfg.rounds`` iterations of predict -> threshold split -> EMA update;
    3. K-means over the unseen candidates gives the unseen prototypes;
    4. K-means over all target samples initialized at the combined prototype
       set refines the pseudo labels (each cluster keeps the identity of its
       initializing prototype);
    5. confidences recomputed prototypically against the final centers.

    With rounds=0 and k=0 the result reduces to plain prototype prediction.
    """
    target_feats = np.asarray(target_feats, dtype=np.float64)
    protos = init_prototypes(source_feats, source_labels, k_s)

    labels, conf, _ = predict_all(target_feats, protos.seen)
    tau, seen_mask = split_seen_unseen(conf)
    for _ in range(cfg.rounds):
        protos = update_prototypes_ema(protos, target_feats, labels, seen_mask,
                                       cfg.alpha)
        labels, conf, _ = predict_all(target_feats, protos.seen)
        tau, seen_mask = split_seen_unseen(conf)

    if cfg.k == 0:
        return PseudoState(pseudo_label=labels, confidence=conf, tau=tau,
                           seen_mask=np.ones_like(seen_mask), prototypes=protos)

    unseen_idx = np.flatnonzero(~seen_mask)
    if unseen_idx.size < cfg.k:
        if not cfg.quantile_fallback:
            raise SeparationError(
                "no unseen candidates (or fewer than k); enable the quantile "
                "fallback or check the data")
        n_fallback = max(cfg.k, int(np.ceil(target_feats.shape[0] / (k_s + cfg.k))))
        unseen_idx = np.argsort(conf, kind="stable")[:n_fallback]
        seen_mask = np.ones(target_feats.shape[0], dtype=bool)
        seen_mask[unseen_idx] = False

    rng = make_rng(cfg.seed)
    eta, _, _ = kmeans(target_feats[unseen_idx], cfg.k, init="kmeans++",
                       max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol, rng=rng)
    protos = PrototypeSet(seen=protos.seen, unseen=eta)

    centers, assignment, _ = kmeans(target_feats, k_s + cfg.k,
                                    init=protos.stacked(),
                                    max_iter=cfg.kmeans_max_iter,
                                    tol=cfg.kmeans_tol)
    final_protos = PrototypeSet(seen=centers[:k_s], unseen=centers[k_s:])
    _, conf, probs = predict_all(target_feats, centers)
    conf = probs[np.arange(target_feats.shape[0]), assignment]
    return PseudoState(pseudo_label=assignment, confidence=conf, tau=tau,
                       seen_mask=assignment < k_s, prototypes=final_protos)


def dump_pseudo_state(state: PseudoState, path):
    """Debug dump: sample_id, pseudo_label, confidence, seen_flag (TSV)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_id\tpseudo_label\tconfidence\tseen_flag\n")
        for i, (lab, c, s) in enumerate(zip(state.pseudo_label, state.confidence,
                                            state.seen_mask)):
            fh.write(f"{i}\t{int(lab)}\t{float(c)!r}\t{int(s)}\n")
