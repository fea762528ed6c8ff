"""End-to-end training orchestration: batching, plain SGD, periodic
pseudo-label refresh, history logging and checkpointing.

The refresh at epoch 0 runs the separation procedure on raw x-features; later
refreshes (every ``refresh_period`` epochs) run it on the current z-features.
Each refresh also recomputes pseudo attributes for seen targets and the full
set of z-prototypes. Everything is seeded and single-threaded, so (seed, cfg,
data) fully determine the run.
"""

import hashlib
import os
import tempfile
from dataclasses import dataclass, field, fields
from typing import List, Tuple

import numpy as np

from .dataio import SourceDataset, read_kv, write_kv
from .exceptions import ConfigError, TrainingError
from .model import ModelParams, forward_gz, init_params, save_checkpoint
from .numkernel import make_rng
from .objective import (BatchLossReport, ObjectiveConfig, TrainBatch,
                        ZPrototypes, compute_z_prototypes, objective_grads)
from .separation import PseudoState, SeparationConfig, run_progressive_separation


@dataclass
class TrainConfig:
    k: int
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    lambda1: float = 1e-4
    lambda2: float = 0.1
    alpha: float = 0.001
    beta: float = 0.2
    seed: int = 0
    refresh_period: int = 10
    separation_rounds: int = 5
    use_lr: bool = True
    use_ld: bool = True
    use_prop: bool = True
    use_fusion: bool = True
    quantile_fallback: bool = True

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lr <= 0 or self.epochs < 1 or self.k < 1:
            raise ConfigError("lr, epochs and k must be positive")
        if self.refresh_period < 1:
            raise ConfigError("refresh_period must be >= 1")

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(lambda1=self.lambda1, lambda2=self.lambda2,
                               beta=self.beta, use_lr=self.use_lr,
                               use_ld=self.use_ld, use_prop=self.use_prop,
                               use_fusion=self.use_fusion)

    def separation(self) -> SeparationConfig:
        return SeparationConfig(k=self.k, alpha=self.alpha,
                                rounds=self.separation_rounds,
                                quantile_fallback=self.quantile_fallback,
                                seed=self.seed)


def save_config(cfg: TrainConfig, path):
    pairs = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        pairs.append((f.name, value))
    write_kv(pairs, path)


def load_config(path) -> TrainConfig:
    known = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    for key, value in read_kv(path):
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in ("k", "epochs", "batch_size", "seed", "refresh_period",
                   "separation_rounds"):
            kwargs[key] = int(value)
        elif key in ("use_lr", "use_ld", "use_prop", "use_fusion",
                     "quantile_fallback"):
            if value not in ("true", "false"):
                raise ConfigError(f"boolean key {key} must be true/false")
            kwargs[key] = value == "true"
        else:
            kwargs[key] = float(value)
    if "k" not in kwargs:
        raise ConfigError("config must set k (number of unseen clusters)")
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


@dataclass
class TrainHistory:
    epochs: List[BatchLossReport] = field(default_factory=list)
    refresh_epochs: List[int] = field(default_factory=list)
    final_tau: float = float("nan")
    params_checksum: str = ""


def make_batches(n_source, n_target, batch_size, rng):
    """Seeded shuffled index batches: paired (source, target) half-batches
    while both streams last, then single-domain batches for the leftover of
    the longer stream. Each domain is covered exactly once per epoch."""
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    half_s = (batch_size + 1) // 2
    half_t = batch_size // 2
    s_order = rng.permutation(n_source)
    t_order = rng.permutation(n_target)
    s_chunks = [s_order[i:i + half_s] for i in range(0, n_source, half_s)]
    t_chunks = [t_order[i:i + half_t] for i in range(0, n_target, half_t)]
    batches = []
    empty = np.empty(0, dtype=np.int64)
    for i in range(max(len(s_chunks), len(t_chunks))):
        s = s_chunks[i] if i < len(s_chunks) else empty
        t = t_chunks[i] if i < len(t_chunks) else empty
        batches.append((s, t))
    return batches


def sgd_step(params: ModelParams, grads, lr):
    """theta <- theta - lr * g. Rejects non-finite gradients."""
    new_arrays = {}
    for name, arr in params.arrays.items():
        g = grads.get(name)
        if g is None:
            new_arrays[name] = arr.copy()
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {name}")
        new_arrays[name] = arr - lr * g
    return ModelParams(new_arrays)


def refresh_pseudo(params: ModelParams, source: SourceDataset, target_features,
                   cfg: TrainConfig, space="z") -> Tuple[PseudoState, ZPrototypes, np.ndarray]:
    """Re-run the separation procedure and derived state.

    ``space="x"`` separates on raw features (epoch-0 initialization);
    ``space="z"`` separates on current G_Z embeddings. Returns the pseudo
    state, the full-set z-prototypes and the per-target pseudo attributes
    (rows of the source attribute table for seen targets, zeros otherwise).
    """
    if space == "x":
        src_feats = source.features
        tgt_feats = np.asarray(target_features, dtype=np.float64)
    elif space == "z":
        src_feats = forward_gz(params, source.features)
        tgt_feats = forward_gz(params, target_features)
    else:
        raise ConfigError(f"unknown separation space {space!r}")
    state = run_progressive_separation(src_feats, source.labels, source.k_s,
                                       tgt_feats, cfg.separation())
    z_t = forward_gz(params, target_features)
    rz = compute_z_prototypes(z_t, state.pseudo_label, source.k_s + cfg.k)
    pseudo_attrs = np.zeros((tgt_feats.shape[0], source.d_a))
    seen = state.seen_mask
    pseudo_attrs[seen] = source.attr_table_seen[state.pseudo_label[seen]]
    return state, rz, pseudo_attrs


def _params_checksum(params: ModelParams):
    h = hashlib.sha256()
    for name in sorted(params.arrays):
        h.update(name.encode())
        h.update(params.arrays[name].tobytes())
    return h.hexdigest()


def train(cfg: TrainConfig, source: SourceDataset, target_features,
          init: ModelParams = None, on_epoch=None):
    """Minimize the full objective; returns (params, history, pseudo_state).

    ``on_epoch(epoch, report)`` is an optional progress callback.
    """
    cfg.validate()
    target_features = np.asarray(target_features, dtype=np.float64)
    params = init.copy() if init is not None else init_params(
        source.features.shape[1], source.d_a, source.k_s, seed=cfg.seed)
    obj_cfg = cfg.objective()
    rng = make_rng(cfg.seed + 1)
    history = TrainHistory()

    pseudo, rz, pseudo_attrs = refresh_pseudo(params, source, target_features,
                                              cfg, space="x")
    history.refresh_epochs.append(0)
    src_attrs = source.sample_attributes()

    for epoch in range(cfg.epochs):
        if epoch > 0 and epoch % cfg.refresh_period == 0:
            pseudo, rz, pseudo_attrs = refresh_pseudo(params, source,
                                                      target_features, cfg,
                                                      space="z")
            history.refresh_epochs.append(epoch)
        sums = np.zeros(5)
        n_batches = 0
        for s_idx, t_idx in make_batches(source.features.shape[0],
                                         target_features.shape[0],
                                         cfg.batch_size, rng):
            batch = TrainBatch(
                xs=source.features[s_idx], ys=source.labels[s_idx],
                src_attrs=src_attrs[s_idx],
                xt=target_features[t_idx],
                t_pseudo=pseudo.pseudo_label[t_idx],
                t_seen_mask=pseudo.seen_mask[t_idx],
                t_pseudo_attrs=pseudo_attrs[t_idx])
            value, report, grads = objective_grads(params, batch, rz, obj_cfg)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}")
            params = sgd_step(params, grads, cfg.lr)
            sums += (report.l_c, report.l_d, report.l_r_source,
                     report.l_r_target, report.l_a)
            n_batches += 1
        means = sums / max(n_batches, 1)
        total = (means[0] + means[1] + cfg.lambda1 * (means[2] + means[3])
                 + cfg.lambda2 * means[4])
        epoch_report = BatchLossReport(l_c=means[0], l_d=means[1],
                                       l_r_source=means[2], l_r_target=means[3],
                                       l_a=means[4], lambda1=cfg.lambda1,
                                       lambda2=cfg.lambda2, total=total)
        history.epochs.append(epoch_report)
        if on_epoch is not None:
            on_epoch(epoch, epoch_report)

    history.final_tau = pseudo.tau
    history.params_checksum = _params_checksum(params)
    return params, history, pseudo


def save_history(history: TrainHistory, path):
    """Per-epoch loss log: epoch,l_c,l_d,l_r_s,l_r_t,l_a,total."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,l_c,l_d,l_r_s,l_r_t,l_a,total\n")
        for i, r in enumerate(history.epochs):
            cols = (r.l_c, r.l_d, r.l_r_source, r.l_r_target, r.l_a, r.total)
            fh.write(f"{i}," + ",".join(repr(float(c)) for c in cols) + "\n")


def save_checkpoint_atomic(params: ModelParams, path):
    """Write-temp-then-rename so a crash never leaves a torn checkpoint."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        save_checkpoint(params, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
