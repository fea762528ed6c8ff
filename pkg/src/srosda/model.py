"""The four trainable networks and their forward passes.

G_Z: d_x -> 1024 -> 512 (ReLU hidden)
G_A: 512 -> 256 -> d_a (ReLU hidden, logistic output)
C:   (512 + d_a) -> 256 -> k_s + 1
D:   (512 + d_a) -> 256 -> 2

Plain numpy forwards are the reference implementations; tape_* variants build
the same computation on autodiff tensors for training. Weights initialize
uniform(+-sqrt(6 / fan_in)), biases zero.
"""

import struct
from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np

from . import autodiff as ad
from .exceptions import ContractError, FormatError
from .numkernel import check_finite, make_rng

Z_DIM = 512
GZ_HIDDEN = 1024
HEAD_HIDDEN = 256

CHECKPOINT_MAGIC = b"SROSCKPT"
CHECKPOINT_VERSION = 1

# declaration order of the parameter arrays
LAYER_NAMES = (
    "gz_w1", "gz_b1", "gz_w2", "gz_b2",
    "ga_w1", "ga_b1", "ga_w2", "ga_b2",
    "c_w1", "c_b1", "c_w2", "c_b2",
    "d_w1", "d_b1", "d_w2", "d_b2",
)


@dataclass
class ModelParams:
    arrays: Dict[str, np.ndarray]

    @property
    def d_x(self):
        return self.arrays["gz_w1"].shape[0]

    @property
    def d_a(self):
        return self.arrays["ga_w2"].shape[1]

    @property
    def k_s(self):
        return self.arrays["c_w2"].shape[1] - 1

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def flat_size(self):
        return sum(v.size for v in self.arrays.values())


def _layer_shapes(d_x, d_a, k_s):
    joint = Z_DIM + d_a
    return {
        "gz_w1": (d_x, GZ_HIDDEN), "gz_b1": (GZ_HIDDEN,),
        "gz_w2": (GZ_HIDDEN, Z_DIM), "gz_b2": (Z_DIM,),
        "ga_w1": (Z_DIM, HEAD_HIDDEN), "ga_b1": (HEAD_HIDDEN,),
        "ga_w2": (HEAD_HIDDEN, d_a), "ga_b2": (d_a,),
        "c_w1": (joint, HEAD_HIDDEN), "c_b1": (HEAD_HIDDEN,),
        "c_w2": (HEAD_HIDDEN, k_s + 1), "c_b2": (k_s + 1,),
        "d_w1": (joint, HEAD_HIDDEN), "d_b1": (HEAD_HIDDEN,),
        "d_w2": (HEAD_HIDDEN, 2), "d_b2": (2,),
    }


def init_params(d_x, d_a, k_s, seed=0) -> ModelParams:
    if d_x < 1 or d_a < 1 or k_s < 1:
        raise ContractError("dimensions must be positive")
    rng = make_rng(seed)
    arrays = {}
    for name, shape in _layer_shapes(d_x, d_a, k_s).items():
        if name.endswith(("b1", "b2")):
            arrays[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(arrays)


# ---------------------------------------------------------------------------
# plain forwards

def _check_input(x, dim, what):
    x = check_finite(x, what)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ContractError(f"{what} must be (n, {dim}), got {x.shape}")
    return x


def forward_gz(params: ModelParams, x):
    x = _check_input(x, params.d_x, "G_Z input")
    a = params.arrays
    h = np.maximum(x @ a["gz_w1"] + a["gz_b1"], 0.0)
    return h @ a["gz_w2"] + a["gz_b2"]


def forward_ga(params: ModelParams, z):
    z = _check_input(z, Z_DIM, "G_A input")
    a = params.arrays
    h = np.maximum(z @ a["ga_w1"] + a["ga_b1"], 0.0)
    logits = h @ a["ga_w2"] + a["ga_b2"]
    e = np.exp(-np.abs(logits))
    return np.where(logits >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def forward_c(params: ModelParams, f):
    f = _check_input(f, Z_DIM + params.d_a, "C input")
    a = params.arrays
    h = np.maximum(f @ a["c_w1"] + a["c_b1"], 0.0)
    return h @ a["c_w2"] + a["c_b2"]


def forward_d(params: ModelParams, f):
    """Softmaxed (seen, unseen) probability pairs; rows sum to 1."""
    f = _check_input(f, Z_DIM + params.d_a, "D input")
    a = params.arrays
    h = np.maximum(f @ a["d_w1"] + a["d_b1"], 0.0)
    logits = h @ a["d_w2"] + a["d_b2"]
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def fuse(z, a):
    """Joint feature z (+) a; attribute entries must lie in [0, 1]."""
    z = np.asarray(z, dtype=np.float64).ravel()
    a = np.asarray(a, dtype=np.float64).ravel()
    if z.shape[0] != Z_DIM:
        raise ContractError(f"z must have length {Z_DIM}")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ContractError("attribute entries must lie in [0, 1]")
    return np.concatenate([z, a])


def split_joint(f, d_a):
    f = np.asarray(f, dtype=np.float64).ravel()
    return f[:Z_DIM], f[Z_DIM:Z_DIM + d_a]


def joint_feature_sets(kind, z, gt_attr=None, pseudo_attr=None, pred_attr=None):
    """The joint-feature set for one sample.

    source       -> [z + gt,      z + predicted]
    target-seen  -> [z + pseudo,  z + predicted]
    target-unseen-> [z + predicted]
    """
    if pred_attr is None:
        raise ContractError("pred_attr is required for every sample kind")
    if kind == "source":
        if gt_attr is None:
            raise ContractError("source samples need gt_attr")
        return [fuse(z, gt_attr), fuse(z, pred_attr)]
    if kind == "target-seen":
        if pseudo_attr is None:
            raise ContractError("target-seen samples need pseudo_attr")
        return [fuse(z, pseudo_attr), fuse(z, pred_attr)]
    if kind == "target-unseen":
        return [fuse(z, pred_attr)]
    raise ContractError(f"unknown sample kind {kind!r}")


# ---------------------------------------------------------------------------
# tape forwards

def param_tensors(params: ModelParams) -> Dict[str, ad.Tensor]:
    return {name: ad.Tensor(arr) for name, arr in params.arrays.items()}


def _affine(pt, x, w, b):
    return ad.add(ad.matmul(x, pt[w]), ad.reshape(pt[b], (1, -1)))


def tape_forward_gz(pt, x):
    return _affine(pt, ad.relu(_affine(pt, ad.ensure(x), "gz_w1", "gz_b1")),
                   "gz_w2", "gz_b2")


def tape_forward_ga(pt, z):
    return ad.sigmoid(_affine(pt, ad.relu(_affine(pt, z, "ga_w1", "ga_b1")),
                              "ga_w2", "ga_b2"))


def tape_forward_c(pt, f):
    return _affine(pt, ad.relu(_affine(pt, f, "c_w1", "c_b1")), "c_w2", "c_b2")


def tape_forward_d_logits(pt, f):
    return _affine(pt, ad.relu(_affine(pt, f, "d_w1", "d_b1")), "d_w2", "d_b2")


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(loss_evaluator: Callable, params: ModelParams, eps=1e-5,
               n_coords=200, seed=0):
    """Compare analytic parameter gradients to central finite differences.

    ``loss_evaluator(params)`` must return ``(value, grads)`` where grads maps
    layer names to arrays; it must be pure in params. A random subset of at
    least ``n_coords`` coordinates is probed; returns the max relative error
    with denominator max(|g|, |g_fd|, 1e-8).
    """
    _, grads = loss_evaluator(params)
    rng = make_rng(seed)
    names = [n for n in LAYER_NAMES if n in params.arrays]
    max_err = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        arr = params.arrays[name]
        flat = rng.integers(arr.size)
        idx = np.unravel_index(flat, arr.shape)
        probe = params.copy()
        probe.arrays[name][idx] += eps
        up, _ = loss_evaluator(probe)
        probe.arrays[name][idx] -= 2.0 * eps
        down, _ = loss_evaluator(probe)
        fd = (up - down) / (2.0 * eps)
        g = float(grads[name][idx]) if name in grads else 0.0
        denom = max(abs(g), abs(fd), 1e-8)
        max_err = max(max_err, abs(g - fd) / denom)
    return max_err


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(LAYER_NAMES)))
        for name in LAYER_NAMES:
            arr = params.arrays[name]
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    try:
        fh = open(path, "rb")
    except OSError as err:
        raise FormatError(f"cannot open checkpoint {path}: {err}") from None
    with fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        if count != len(LAYER_NAMES):
            raise FormatError(f"{path}: expected {len(LAYER_NAMES)} layers, got {count}")
        arrays = {}
        for name in LAYER_NAMES:
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            n_bytes = int(np.prod(shape)) * 8
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise FormatError(f"{path}: truncated layer {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    params = ModelParams(arrays)
    expected = _layer_shapes(params.d_x, params.d_a, params.k_s)
    for name, shape in expected.items():
        if params.arrays[name].shape != shape:
            raise FormatError(f"{path}: inconsistent shape for layer {name}")
    return params
