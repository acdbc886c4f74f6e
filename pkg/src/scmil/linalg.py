"""Dense linear algebra and scalar kernels.

Matrices and vectors are plain float64 numpy arrays (2-D and 1-D). The
wrappers here add shape checking and the few kernels numpy does not ship
(soft-thresholding, the over-complete DCT, overflow-safe softplus).
"""

import math

import numpy as np

from .exceptions import ConvergenceError

SPECTRAL_TOL = 1e-10
SPECTRAL_MAX_ITER = 10_000


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


# ---------------------------------------------------------------------------
# dense kernels


def gemm(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"gemm shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def gemv(a, x) -> np.ndarray:
    a, x = as_matrix(a), as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise ValueError(f"gemv shape mismatch: {a.shape} @ {x.shape}")
    return a @ x


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y`` (new array)."""
    x, y = as_vector(x), as_vector(y)
    if x.shape != y.shape:
        raise ValueError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return alpha * x + y


def dot(x, y) -> float:
    x, y = as_vector(x), as_vector(y)
    if x.shape != y.shape:
        raise ValueError(f"dot shape mismatch: {x.shape} vs {y.shape}")
    return float(x @ y)


# ---------------------------------------------------------------------------
# proximal operator


def soft_threshold(v, lam):
    """Element-wise ``sign(v) * max(|v| - lam, 0)``.

    ``lam`` may be a scalar or anything that broadcasts against ``v`` (the
    model passes one threshold per instance row).
    """
    v = np.asarray(v, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("soft_threshold: lambda must be non-negative")
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


# ---------------------------------------------------------------------------
# spectral norm


def spectral_norm(m, tol: float = SPECTRAL_TOL, max_iter: int = SPECTRAL_MAX_ITER) -> float:
    """Largest singular value of ``m`` by power iteration on ``m.T @ m``.

    Starts from the normalised all-ones vector so results are reproducible.
    Raises ConvergenceError (with the last eigenvector iterate attached) if
    the relative change of the estimate never drops below ``tol``.
    """
    m = as_matrix(m)
    if tol <= 0:
        raise ValueError("spectral_norm: tol must be positive")
    if not np.any(m):
        return 0.0
    v = np.ones(m.shape[1]) / math.sqrt(m.shape[1])
    sigma = 0.0
    for _ in range(max_iter):
        w = m.T @ (m @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            # start vector in the null space; nudge deterministically
            v = np.roll(v, 1) + np.arange(v.size) / v.size
            v /= np.linalg.norm(v)
            continue
        v_new = w / nrm
        # sqrt of the Rayleigh quotient of m.T m at the new iterate
        sigma_new = float(np.linalg.norm(m @ v_new))
        if abs(sigma_new - sigma) <= tol * sigma_new:
            return sigma_new
        v, sigma = v_new, sigma_new
    raise ConvergenceError(
        f"spectral_norm did not converge in {max_iter} iterations (last estimate {sigma})",
        last_iterate=v,
    )


# ---------------------------------------------------------------------------
# dictionary initialisation


def overcomplete_dct(p: int, m: int) -> np.ndarray:
    """p x m over-complete DCT dictionary with unit-norm columns.

    Column k samples ``cos(pi * k * (2r + 1) / (2m))`` at rows r = 0..p-1;
    the non-constant columns (k >= 1) are mean-centred before normalising.
    """
    if p < 1:
        raise ValueError("overcomplete_dct: p must be >= 1")
    if m < p:
        raise ValueError(f"overcomplete_dct: need m >= p (got m={m}, p={p})")
    r = np.arange(p)[:, None]
    k = np.arange(m)[None, :]
    d = np.cos(np.pi * k * (2 * r + 1) / (2 * m))
    d[:, 1:] -= d[:, 1:].mean(axis=0)
    norms = np.linalg.norm(d, axis=0)
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0).tolist()
        raise ValueError(f"overcomplete_dct: columns {bad} vanish after centring (p={p}, m={m})")
    return d / norms


# ---------------------------------------------------------------------------
# activations

_SOFTPLUS_CUT = 30.0


def softplus(x):
    """ln(1 + e^x) without overflow; identity above 30, e^x below -30."""
    x = np.asarray(x, dtype=np.float64)
    clipped = np.clip(x, -_SOFTPLUS_CUT, _SOFTPLUS_CUT)
    out = np.log1p(np.exp(clipped))
    out = np.where(x > _SOFTPLUS_CUT, x, out)
    out = np.where(x < -_SOFTPLUS_CUT, np.exp(np.minimum(x, 0.0)), out)
    return out if out.ndim else float(out)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def softplus_grad(x):
    return sigmoid(x)


def tanh(x):
    out = np.tanh(np.asarray(x, dtype=np.float64))
    return out if out.ndim else float(out)


def relu(x):
    out = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    return out if out.ndim else float(out)
