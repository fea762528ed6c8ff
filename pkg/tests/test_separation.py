import itertools

import numpy as np
import pytest

from srosda.exceptions import ContractError, DataError, SeparationError
from srosda.numkernel import make_rng
from srosda.separation import (PrototypeSet, SeparationConfig, init_prototypes,
                               kmeans, predict_all, prototype_predict,
                               run_progressive_separation, split_seen_unseen,
                               update_prototypes_ema)


def test_init_prototypes_class_means():
    feats = np.array([[0.0, 0.0], [2.0, 2.0], [4.0, 0.0]])
    labels = np.array([0, 0, 1])
    protos = init_prototypes(feats, labels, 2)
    assert np.array_equal(protos.seen, [[1.0, 1.0], [4.0, 0.0]])
    assert protos.unseen.shape == (0, 2)
    with pytest.raises(DataError):
        init_prototypes(feats, labels, 3)


def test_prototype_set_stacked():
    p = PrototypeSet(seen=np.ones((2, 3)), unseen=np.empty((0, 3)))
    assert p.stacked().shape == (2, 3)
    p = PrototypeSet(seen=np.ones((2, 3)), unseen=np.zeros((1, 3)))
    assert p.stacked().shape == (3, 3)


def test_predict_all_two_prototype_oracle():
    protos = np.array([[1.0, 0.0], [0.0, 1.0]])
    x = np.array([[1.0, 0.0]])
    labels, conf, probs = predict_all(x, protos)
    # cosine distances are 0 and 1; softmax over negatives:
    # p0 = e^0/(e^0+e^-1) = 0.7310585786300049
    assert labels[0] == 0
    assert conf[0] == pytest.approx(0.7310585786300049, abs=1e-12)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_predict_all_tie_breaks_low_index():
    protos = np.array([[1.0, 0.0], [1.0, 0.0]])
    labels, _, probs = predict_all(np.array([[2.0, 0.0]]), protos)
    assert labels[0] == 0
    assert probs[0, 0] == probs[0, 1]


def test_predict_all_scale_invariance():
    rng = make_rng(0)
    protos = rng.normal(size=(4, 6))
    x = rng.normal(size=(10, 6))
    l1, c1, _ = predict_all(x, protos)
    l2, c2, _ = predict_all(5.0 * x, protos)
    assert np.array_equal(l1, l2)
    assert np.allclose(c1, c2, atol=1e-12)


def test_prototype_predict_single():
    protos = np.array([[1.0, 0.0], [0.0, 1.0]])
    lab, conf, probs = prototype_predict(np.array([0.0, 3.0]), protos)
    assert lab == 1
    assert probs.shape == (2,)
    assert conf == pytest.approx(probs[1])


def test_predict_all_contracts():
    with pytest.raises(ContractError):
        predict_all(np.zeros((2, 3)), np.zeros((0, 3)))
    with pytest.raises(ContractError):
        predict_all(np.zeros((2, 3)), np.zeros((2, 4)))


def test_split_seen_unseen_threshold_inclusive():
    tau, mask = split_seen_unseen([0.25, 0.5, 0.75])
    assert tau == 0.5
    assert np.array_equal(mask, [False, True, True])  # >= tau is seen
    with pytest.raises(ContractError):
        split_seen_unseen([])


def test_ema_update_formula():
    protos = PrototypeSet(seen=np.array([[0.0, 0.0], [10.0, 10.0]]),
                          unseen=np.empty((0, 2)))
    feats = np.array([[2.0, 0.0], [4.0, 0.0], [0.0, 9.0]])
    labels = np.array([0, 0, 1])
    seen_mask = np.array([True, True, False])
    out = update_prototypes_ema(protos, feats, labels, seen_mask, alpha=0.5)
    # class 0 blends toward mean [3, 0]; class 1 has no confident member
    assert np.allclose(out.seen[0], [1.5, 0.0], atol=1e-12)
    assert np.array_equal(out.seen[1], [10.0, 10.0])
    # original object untouched
    assert np.array_equal(protos.seen[0], [0.0, 0.0])
    with pytest.raises(ContractError):
        update_prototypes_ema(protos, feats, labels, seen_mask, alpha=1.5)


# ---------------------------------------------------------------------------
# k-means

def brute_force_best_partition(points, k):
    """Exhaustive minimum inertia over all assignments (oracle)."""
    n = points.shape[0]
    best = (np.inf, None)
    for assign in itertools.product(range(k), repeat=n):
        assign = np.asarray(assign)
        inertia = 0.0
        for c in range(k):
            members = points[assign == c]
            if members.shape[0]:
                inertia += ((members - members.mean(axis=0)) ** 2).sum()
        if inertia < best[0]:
            best = (inertia, assign)
    return best


def test_kmeans_explicit_init_two_clusters():
    points = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    centers, assign, inertia = kmeans(points, 2,
                                      init=np.array([[0.0, 0.0], [10.0, 0.0]]))
    assert np.array_equal(assign, [0, 0, 1, 1])
    assert np.allclose(centers, [[0.0, 0.5], [10.0, 0.5]], atol=1e-12)
    assert inertia == pytest.approx(1.0, abs=1e-12)


def test_kmeans_matches_exhaustive_oracle():
    rng = make_rng(3)
    for trial in range(20):
        points = rng.normal(size=(rng.integers(4, 8), 2))
        opt_inertia, opt_assign = brute_force_best_partition(points, 2)
        centers = np.stack([points[opt_assign == c].mean(axis=0)
                            for c in range(2)])
        _, _, inertia = kmeans(points, 2, init=centers)
        assert inertia <= opt_inertia + 1e-9
        assert inertia >= opt_inertia - 1e-9  # optimum is a fixed point


def test_kmeans_empty_cluster_reseeded():
    points = np.array([[0.0, 0.0], [1.0, 0.0], [100.0, 0.0]])
    # second center so remote that it owns nothing initially
    centers, assign, _ = kmeans(points, 2,
                                init=np.array([[0.0, 0.0], [-1e6, 0.0]]))
    assert len(set(assign.tolist())) == 2  # both clusters end up used


def test_kmeans_pp_seeded_deterministic():
    points = make_rng(1).normal(size=(30, 3))
    a = kmeans(points, 3, init="kmeans++", rng=make_rng(5))
    b = kmeans(points, 3, init="kmeans++", rng=make_rng(5))
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


def test_kmeans_contracts():
    points = np.zeros((3, 2))
    with pytest.raises(ContractError):
        kmeans(points, 0)
    with pytest.raises(ContractError):
        kmeans(points, 4, init="kmeans++", rng=make_rng(0))
    with pytest.raises(ContractError):
        kmeans(points, 2, init=np.zeros((3, 2)))
    with pytest.raises(ContractError):
        kmeans(points, 2, init="median")


# ---------------------------------------------------------------------------
# full separation

def two_domain_fixture(seed=0, n=40):
    """3 seen + 2 unseen well-separated clusters, no shift."""
    rng = make_rng(seed)
    protos = np.array([[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0],
                       [7.0, 7.0, 0.0], [0.0, 7.0, 7.0]])
    t_labels = np.repeat(np.arange(5), n)
    t_feats = protos[t_labels] + rng.normal(size=(5 * n, 3)) * 0.3
    s_labels = np.repeat(np.arange(3), n)
    s_feats = protos[s_labels] + rng.normal(size=(3 * n, 3)) * 0.3
    return s_feats, s_labels, t_feats, t_labels


def test_progressive_separation_recovers_structure():
    s_feats, s_labels, t_feats, t_labels = two_domain_fixture()
    cfg = SeparationConfig(k=2, rounds=5, seed=0)
    state = run_progressive_separation(s_feats, s_labels, 3, t_feats, cfg)
    seen_true = t_labels < 3
    # seen samples keep their class
    assert np.mean(state.pseudo_label[seen_true] == t_labels[seen_true]) > 0.95
    # unseen samples flagged unseen
    assert np.mean(~state.seen_mask[~seen_true]) > 0.95
    assert np.all(state.seen_mask == (state.pseudo_label < 3))
    assert state.confidence.min() > 0.0 and state.confidence.max() <= 1.0
    assert 0.0 < state.tau < 1.0
    assert state.prototypes.seen.shape == (3, 3)
    assert state.prototypes.unseen.shape == (2, 3)
    # each unseen cluster is pure (majority vote)
    for c in (3, 4):
        members = t_labels[state.pseudo_label == c]
        assert members.size > 0
        counts = np.bincount(members, minlength=5)
        assert counts.max() / members.size > 0.95


def test_progressive_separation_deterministic():
    s_feats, s_labels, t_feats, _ = two_domain_fixture()
    cfg = SeparationConfig(k=2, rounds=3, seed=7)
    a = run_progressive_separation(s_feats, s_labels, 3, t_feats, cfg)
    b = run_progressive_separation(s_feats, s_labels, 3, t_feats, cfg)
    assert np.array_equal(a.pseudo_label, b.pseudo_label)
    assert np.array_equal(a.confidence, b.confidence)
    assert a.tau == b.tau


def test_progressive_separation_k_zero_plain_prediction():
    s_feats, s_labels, t_feats, t_labels = two_domain_fixture()
    cfg = SeparationConfig(k=0, rounds=0, seed=0)
    state = run_progressive_separation(s_feats, s_labels, 3, t_feats, cfg)
    labels, conf, _ = predict_all(t_feats, init_prototypes(s_feats, s_labels, 3).seen)
    assert np.array_equal(state.pseudo_label, labels)
    assert np.array_equal(state.confidence, conf)
    assert np.all(state.seen_mask)


def test_progressive_separation_no_candidates():
    # all target samples identical to one source class: everything confident
    s_feats = np.array([[5.0, 0.0], [5.2, 0.0], [0.0, 5.0], [0.0, 5.1]])
    s_labels = np.array([0, 0, 1, 1])
    t_feats = np.tile([5.1, 0.0], (8, 1))
    cfg = SeparationConfig(k=1, rounds=1, seed=0, quantile_fallback=False)
    with pytest.raises(SeparationError):
        run_progressive_separation(s_feats, s_labels, 2, t_feats, cfg)
    cfg = SeparationConfig(k=1, rounds=1, seed=0, quantile_fallback=True)
    state = run_progressive_separation(s_feats, s_labels, 2, t_feats, cfg)
    # fallback completes and yields a full prototype set even on degenerate
    # data (identical points may still all refine back to one cluster)
    assert state.prototypes.unseen.shape == (1, 2)
    assert state.pseudo_label.shape == (8,)
