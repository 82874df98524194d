"""Minimal dense linear algebra used by every numeric module.

Matrices are plain 2-d float64 ndarrays (row-major), vectors are 1-d float64
ndarrays.  All solvers go through a pivot-checked Cholesky factorization so
that rank deficiency surfaces as a :class:`SingularMatrixError` naming the
offending pivot instead of silently producing garbage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InsufficientDataError, ShapeError, SingularMatrixError

Matrix = np.ndarray
Vector = np.ndarray

# Pivot threshold relative to the largest diagonal entry of the Gram matrix.
PIVOT_RTOL = 1e-12
SYMMETRY_RTOL = 1e-10


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Coerce to a finite 2-d float64 array."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


def as_vector(a, name: str = "vector") -> Vector:
    """Coerce to a finite 1-d float64 array."""
    out = np.asarray(a, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with explicit conformance checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _pivoted_cholesky(a: Matrix) -> Matrix:
    """Lower Cholesky factor with a per-pivot tolerance check.

    Raises SingularMatrixError naming the first pivot that falls below
    PIVOT_RTOL relative to the largest diagonal entry.
    """
    n = a.shape[0]
    diag = np.diag(a)
    scale = float(np.max(np.abs(diag))) if n else 0.0
    if scale <= 0.0:
        raise SingularMatrixError("matrix has no positive diagonal entry", pivot=0)
    tol = PIVOT_RTOL * scale
    lower = np.zeros_like(a)
    for k in range(n):
        d = a[k, k] - lower[k, :k] @ lower[k, :k]
        if d <= tol:
            raise SingularMatrixError(
                f"pivot {k} is {d:.3e}, below tolerance {tol:.3e}", pivot=k
            )
        lower[k, k] = np.sqrt(d)
        if k + 1 < n:
            lower[k + 1 :, k] = (a[k + 1 :, k] - lower[k + 1 :, :k] @ lower[k, :k]) / lower[k, k]
    return lower


def _ldl_solve(a: Matrix, b: Matrix) -> Matrix:
    """LDL^T solve for symmetric indefinite (but nonsingular) systems."""
    lu, d, perm = scipy.linalg.ldl(a, lower=True)
    dd = np.diag(d)
    # ldl may emit 2x2 blocks; off-diagonal mass on d means a true block,
    # which scipy.linalg.solve handles below.  For the diagonal case check pivots.
    if np.allclose(d, np.diag(dd), atol=1e-300):
        scale = float(np.max(np.abs(dd))) if dd.size else 0.0
        bad = np.where(np.abs(dd) <= PIVOT_RTOL * max(scale, 1e-300))[0]
        if bad.size:
            raise SingularMatrixError(
                f"pivot {bad[0]} is {dd[bad[0]]:.3e} in LDL factorization",
                pivot=int(bad[0]),
            )
    return scipy.linalg.solve(a, b, assume_a="sym")


def solve_sym(a: Matrix, b: Matrix | Vector) -> Matrix | Vector:
    """Solve a x = b for symmetric a without modifying the inputs.

    Cholesky is attempted first (all Gram-like blocks are SPD); symmetric
    indefinite inputs fall back to an LDL^T factorization.  Singular or
    ill-conditioned input raises SingularMatrixError naming the pivot.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"a must be square, got {a.shape}")
    vector_rhs = np.asarray(b).ndim == 1
    b2 = as_vector(b, "b").reshape(-1, 1) if vector_rhs else as_matrix(b, "b")
    if b2.shape[0] != a.shape[0]:
        raise ShapeError(f"rhs has {b2.shape[0]} rows, expected {a.shape[0]}")
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if float(np.max(np.abs(a - a.T))) > SYMMETRY_RTOL * max(scale, 1.0):
        raise ShapeError("a is not symmetric within 1e-10 relative")
    try:
        lower = _pivoted_cholesky(a)
    except SingularMatrixError as err:
        # Indefinite-but-nonsingular blocks (negative eigenvalue) still solve.
        if a.shape[0] > 1 and np.min(np.linalg.eigvalsh(0.5 * (a + a.T))) < 0:
            x = _ldl_solve(a, b2)
            return x[:, 0] if vector_rhs else x
        raise err
    y = scipy.linalg.solve_triangular(lower, b2, lower=True)
    x = scipy.linalg.solve_triangular(lower.T, y, lower=False)
    return x[:, 0] if vector_rhs else x


def inv_sym(a: Matrix) -> Matrix:
    """Inverse of a symmetric positive definite matrix."""
    a = as_matrix(a, "a")
    out = solve_sym(a, np.eye(a.shape[0]))
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class OlsFit:
    """Least-squares solution with the pieces needed for variance assembly."""

    coef: Vector
    residual_var: float  # RSS / (n - p)
    xtx_inv: Matrix  # (X'X)^-1 on the original column scale


def _standardizer(design: Matrix) -> tuple[Matrix, Matrix]:
    """Build the column map A with design @ A centered/scaled for conditioning.

    A single constant column acts as the intercept and absorbs the centering;
    any other constant column is rank deficiency by policy (no silent drops).
    """
    n, p = design.shape
    spans = design.max(axis=0) - design.min(axis=0)
    const_cols = np.where(spans == 0.0)[0]
    if const_cols.size > 1:
        raise SingularMatrixError(
            f"columns {const_cols.tolist()} are all constant (collinear)",
            pivot=int(const_cols[1]),
        )
    transform = np.zeros((p, p))
    if const_cols.size == 1:
        icol = int(const_cols[0])
        c = design[0, icol]
        if c == 0.0:
            raise SingularMatrixError(f"column {icol} is identically zero", pivot=icol)
        transform[icol, icol] = 1.0 / c
        for j in range(p):
            if j == icol:
                continue
            mu = design[:, j].mean()
            sd = design[:, j].std()
            transform[j, j] = 1.0 / sd
            transform[icol, j] = -mu / (c * sd)
    else:
        for j in range(p):
            sd = design[:, j].std()
            if sd == 0.0:
                raise SingularMatrixError(f"column {j} is identically zero", pivot=j)
            transform[j, j] = 1.0 / sd
    return transform, design @ transform


def ols_solve(design: Matrix, response: Vector) -> OlsFit:
    """Ordinary least squares via centered/scaled normal equations.

    Returned coefficients and (X'X)^-1 are on the original column scale;
    residual_var uses the unbiased n - p denominator.
    """
    design = as_matrix(design, "design")
    response = as_vector(response, "response")
    n, p = design.shape
    if response.shape[0] != n:
        raise ShapeError(f"response has {response.shape[0]} rows, design has {n}")
    if n <= p:
        raise InsufficientDataError(f"need more rows than columns, got n={n}, p={p}")
    transform, scaled = _standardizer(design)
    gram = scaled.T @ scaled
    coef_scaled = solve_sym(gram, scaled.T @ response)
    coef = transform @ coef_scaled
    resid = response - design @ coef
    residual_var = float(resid @ resid) / (n - p)
    xtx_inv = transform @ inv_sym(gram) @ transform.T
    return OlsFit(coef=coef, residual_var=residual_var, xtx_inv=0.5 * (xtx_inv + xtx_inv.T))
