"""Deterministic numeric substrate: distances, softmax, variance, small dense
inverses and seeded RNG construction.

Everything here is pure and double precision. Reductions rely on numpy's
fixed left-to-right summation so repeated runs agree bitwise.
"""

import warnings

import numpy as np

from .exceptions import ContractError, DataError, SingularMatrixError

MAX_INVERSE_SIZE = 512
CONDITION_LIMIT = 1e12
ZERO_NORM_EPS = 1e-12


class DegenerateInputWarning(UserWarning):
    """Signals a near-zero-norm vector fed to a cosine distance."""


def make_rng(seed):
    """Seeded PCG64 generator. Identical seed + call sequence gives an
    identical stream on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def check_finite(a, name="input"):
    """Coerce to a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def pairwise_sq_dist(m):
    """All-pairs squared Euclidean distances of the rows of ``m``.

    The result is exactly symmetric with an exactly zero diagonal.
    """
    m = check_finite(m, "matrix")
    if m.ndim != 2 or m.shape[0] < 1:
        raise ContractError("pairwise_sq_dist expects a non-empty 2-D matrix")
    sq = np.einsum("ij,ij->i", m, m)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (m @ m.T)
    d2 = 0.5 * (d2 + d2.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def cosine_dist(u, v):
    """1 - cos(u, v), in [0, 2]. Near-zero-norm inputs yield the neutral
    distance 1.0 and a DegenerateInputWarning instead of NaN."""
    u = check_finite(u, "u").ravel()
    v = check_finite(v, "v").ravel()
    if u.shape != v.shape:
        raise ContractError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < ZERO_NORM_EPS or nv < ZERO_NORM_EPS:
        warnings.warn("near-zero-norm vector in cosine_dist; returning neutral "
                      "distance 1.0", DegenerateInputWarning, stacklevel=2)
        return 1.0
    c = float(np.dot(u, v) / (nu * nv))
    return float(np.clip(1.0 - c, 0.0, 2.0))


def softmax_neg(values):
    """exp(-v_c) / sum_c' exp(-v_c'), computed with max-subtraction so large
    distances do not overflow."""
    values = check_finite(values, "values").ravel()
    if values.size == 0:
        raise ContractError("softmax_neg requires a non-empty vector")
    shifted = -(values - values.min())
    e = np.exp(shifted)
    return e / e.sum()


def variance(values):
    """Population variance (divide by count)."""
    values = check_finite(values, "values").ravel()
    if values.size == 0:
        raise ContractError("variance requires at least one value")
    mean = values.sum() / values.size
    dev = values - mean
    return float(np.dot(dev, dev) / values.size)


def inv_small(m):
    """Invert a small dense square matrix via Gauss-Jordan elimination with
    partial pivoting.

    Raises SingularMatrixError on a (near-)zero pivot or when the 1-norm
    condition estimate exceeds CONDITION_LIMIT.
    """
    m = check_finite(m, "matrix")
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError("inv_small expects a square matrix")
    n = m.shape[0]
    if n > MAX_INVERSE_SIZE:
        raise ContractError(f"inv_small limited to n <= {MAX_INVERSE_SIZE}, got {n}")
    a = m.copy()
    inv = np.eye(n)
    scale = np.abs(m).max()
    if scale == 0.0:
        raise SingularMatrixError("zero matrix is singular")
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        pv = a[piv, col]
        if abs(pv) <= scale * 1e-13:
            raise SingularMatrixError(f"zero pivot at column {col}")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            inv[[col, piv]] = inv[[piv, col]]
        a[col] /= pv
        inv[col] /= pv
        factors = a[:, col].copy()
        factors[col] = 0.0
        a -= np.outer(factors, a[col])
        inv -= np.outer(factors, inv[col])
    cond = np.abs(m).sum(axis=0).max() * np.abs(inv).sum(axis=0).max()
    if cond > CONDITION_LIMIT:
        raise SingularMatrixError(f"condition estimate {cond:.3e} exceeds limit")
    return inv
