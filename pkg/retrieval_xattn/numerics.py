# retrieval_xattn/numerics.py
#
# Dense linear algebra and differentiable primitives the rest of the package
# is built from. Matrices are numpy arrays: 2-D, row-major, float32 unless a
# caller deliberately promotes them (gradient checks run in float64).

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np
import numpy.typing as npt

from .errors import ArgumentError, NumericError, shape_error

Matrix = npt.NDArray[np.floating]

DEFAULT_DTYPE = np.float32


def as_matrix(data, rows: int | None = None, cols: int | None = None, dtype=DEFAULT_DTYPE) -> Matrix:
    """Build a C-contiguous 2-D matrix from nested lists or a flat buffer."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise shape_error("as_matrix", (arr.size,), (rows, cols))
        arr = arr.reshape(rows, cols)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, 0)
    if arr.ndim != 2:
        raise ArgumentError(f"as_matrix: expected 2-D data, got {arr.ndim}-D")
    return arr


class Rng:
    """Splittable counter-based random source (Philox under a SeedSequence).

    `split(...)` derives an independent, deterministic child stream from a key
    path, so modules can draw from one run seed without sharing state.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def split(self, *keys: int | str) -> Rng:
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ArgumentError(f"Rng keys must be non-negative, got {key}")
    return int(key)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise shape_error("matmul", a.shape, b.shape)
    return a @ b


def softmax(v) -> np.ndarray:
    """Probability vector of a 1-D score vector (max-subtracted)."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ArgumentError(f"softmax expects a vector, got shape {v.shape}")
    if v.size == 0:
        raise ArgumentError("softmax of an empty vector")
    if np.isnan(v).any():
        raise NumericError("softmax input contains NaN")
    return softmax_rows(v)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    # last-axis softmax; -inf entries (masked) get zero probability
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits of a last-axis softmax with output p."""
    return p * (dp - np.sum(p * dp, axis=-1, keepdims=True))


def seeded_normal(rng: Rng, rows: int, cols: int, std: float, dtype=DEFAULT_DTYPE) -> Matrix:
    if not std > 0:
        raise ArgumentError(f"seeded_normal: std must be > 0, got {std}")
    if rows < 0 or cols < 0:
        raise ArgumentError(f"seeded_normal: negative shape ({rows}, {cols})")
    out = rng.generator.standard_normal((rows, cols), dtype=np.float64) * std
    return np.ascontiguousarray(out.astype(dtype))


def grad_check(
    f: Callable[[np.ndarray], float],
    analytic_grad: np.ndarray,
    x: np.ndarray,
    eps: float = 1e-3,
) -> float:
    """Max relative error between `analytic_grad` and central differences of f at x.

    Relative error per entry is |a - c| / max(|a|, |c|, 1e-8). `x` is not mutated.
    """
    if not eps > 0:
        raise ArgumentError(f"grad_check: eps must be > 0, got {eps}")
    if analytic_grad.shape != x.shape:
        raise shape_error("grad_check", analytic_grad.shape, x.shape)

    perturbed = np.array(x, copy=True)
    numeric = np.zeros(x.shape, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        orig = perturbed[idx]
        perturbed[idx] = orig + eps
        f_plus = float(f(perturbed))
        perturbed[idx] = orig - eps
        f_minus = float(f(perturbed))
        perturbed[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"grad_check: f is not finite around index {idx}")
        numeric[idx] = (f_plus - f_minus) / (2.0 * eps)

    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if numeric.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
