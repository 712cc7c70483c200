"""Generalized symmetric pencil B x = μ A x and spectral-tail diagnostics.

``A`` is the SPD energy matrix, ``B`` the (possibly sign-indefinite) boundary
weight matrix; the eigenvalues μ are the Rayleigh-quotient spectrum of
weight/energy.  The near-zero cluster coming from interior modes (B is
boundary-supported, so its rank is at most the boundary node count) is
dropped by a relative threshold.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "EigensolveError",
    "Spectrum",
    "TailEstimate",
    "solve_dense",
    "solve_iterative",
    "merge_spectra",
    "counting",
    "tail_coefficient",
    "spectrum_to_csv",
    "spectrum_from_csv",
]

DENSE_DIMENSION_CAP = 8000
DENSE_RESIDUAL_TOL = 1e-8
ITERATIVE_RESIDUAL_TOL = 1e-6
ZERO_THRESHOLD_REL = 1e-12


class EigensolveError(RuntimeError):
    """Pencil solve failed or was called outside its contract."""


@dataclass
class Spectrum:
    """Signed ratio spectrum, split by branch.

    ``positive`` is sorted descending; ``negative`` is sorted by magnitude
    descending (most negative first).  Residuals are ‖Bx − μAx‖₂ for the
    A-normalized eigenvector of each retained pair.
    """

    positive: np.ndarray
    negative: np.ndarray
    residuals_positive: np.ndarray
    residuals_negative: np.ndarray
    method: str
    zero_threshold: float
    n_dropped: int = 0
    boundary_rank: int | None = None

    def branch(self, sign: str) -> np.ndarray:
        if sign in ("+", "pos", "positive"):
            return self.positive
        if sign in ("-", "neg", "negative"):
            return self.negative
        raise EigensolveError(f"unknown branch {sign!r}")

    @property
    def residual_tolerance(self) -> float:
        return DENSE_RESIDUAL_TOL if self.method == "dense" else ITERATIVE_RESIDUAL_TOL


def _split_branches(mu, res, method, zero_threshold, boundary_rank):
    mu = np.asarray(mu, dtype=float)
    res = np.asarray(res, dtype=float)
    keep = np.abs(mu) > zero_threshold
    dropped = int(len(mu) - keep.sum())
    mu, res = mu[keep], res[keep]
    pos = mu > 0
    order_p = np.argsort(-mu[pos], kind="stable")
    order_n = np.argsort(mu[~pos], kind="stable")  # most negative first
    return Spectrum(
        positive=mu[pos][order_p],
        negative=mu[~pos][order_n],
        residuals_positive=res[pos][order_p],
        residuals_negative=res[~pos][order_n],
        method=method,
        zero_threshold=zero_threshold,
        n_dropped=dropped,
        boundary_rank=boundary_rank,
    )


def _as_csr(mat) -> sp.csr_matrix:
    if sp.issparse(mat):
        return mat.tocsr()
    return sp.csr_matrix(np.asarray(mat, dtype=float))


def _boundary_rank(B: sp.csr_matrix) -> int:
    d = np.asarray(np.abs(B).sum(axis=1)).ravel()
    return int(np.count_nonzero(d > 0))


def _residuals(A, B, mu, X):
    R = B @ X - A @ X * mu[None, :]
    return np.linalg.norm(R, axis=0)


def solve_dense(A, B) -> Spectrum:
    """All pencil eigenvalues via Cholesky reduction A = LLᵀ and a symmetric
    eigendecomposition of L⁻¹BL⁻ᵀ (whose spectrum is exactly the ratio
    spectrum)."""
    A = _as_csr(A)
    B = _as_csr(B)
    n = A.shape[0]
    if n > DENSE_DIMENSION_CAP:
        raise EigensolveError(
            f"dense solve capped at {DENSE_DIMENSION_CAP} unknowns (got {n})"
        )
    Ad = A.toarray()
    try:
        L = np.linalg.cholesky(Ad)
    except np.linalg.LinAlgError as exc:
        raise EigensolveError("energy matrix is not SPD") from exc
    Bd = B.toarray()
    Y = sla.solve_triangular(L, Bd, lower=True)
    C = sla.solve_triangular(L, Y.T, lower=True)
    C = 0.5 * (C + C.T)
    w, V = np.linalg.eigh(C)
    X = sla.solve_triangular(L, V, lower=True, trans="T")
    res = _residuals(A, B, w, X)
    zero_threshold = ZERO_THRESHOLD_REL * float(np.abs(w).max(initial=0.0))
    return _split_branches(w, res, "dense", zero_threshold, _boundary_rank(B))


def solve_iterative(A, B, k: int, *, sign: str = "+", seed: int = 0, maxiter=None) -> Spectrum:
    """Largest-|μ| pairs of one branch via shift-free Lanczos on the pencil.

    The start vector is seeded deterministically so repeated runs agree
    bitwise.  ``k`` is capped by the boundary rank of B (eigenvalues beyond
    it are structural zeros)."""
    A = _as_csr(A)
    B = _as_csr(B)
    n = A.shape[0]
    rank = _boundary_rank(B)
    if B.nnz == 0 or rank == 0:
        return Spectrum(
            np.array([]), np.array([]), np.array([]), np.array([]),
            "iterative", 0.0, 0, 0,
        )
    if k > rank:
        raise EigensolveError(f"requested {k} pairs but weight rank is {rank}")
    which = "LA" if sign in ("+", "pos", "positive") else "SA"
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        w, X = spla.eigsh(B, k=k, M=A, which=which, v0=v0, maxiter=maxiter)
    except spla.ArpackNoConvergence as exc:
        raise EigensolveError(
            f"iterative solve did not converge ({len(exc.eigenvalues)} of {k} pairs)"
        ) from exc
    res = _residuals(A, B, w, X)
    ref = float(np.abs(w).max(initial=0.0))
    zero_threshold = ZERO_THRESHOLD_REL * ref
    spec = _split_branches(w, res, "iterative", zero_threshold, rank)
    return spec


def merge_spectra(pos: Spectrum, neg: Spectrum) -> Spectrum:
    """Combine the positive branch of one solve with the negative branch of
    another (two one-sided iterative runs on the same pencil)."""
    return Spectrum(
        positive=pos.positive,
        negative=neg.negative,
        residuals_positive=pos.residuals_positive,
        residuals_negative=neg.residuals_negative,
        method=pos.method,
        zero_threshold=max(pos.zero_threshold, neg.zero_threshold),
        n_dropped=pos.n_dropped + neg.n_dropped,
        boundary_rank=pos.boundary_rank,
    )


def counting(spec: Spectrum, lam: float, sign: str = "+") -> int:
    """n±(λ): eigenvalues of the branch with |μ| ≥ λ (closed count)."""
    if lam <= 0:
        raise EigensolveError("counting threshold must be positive")
    branch = spec.branch(sign)
    return int(np.count_nonzero(np.abs(branch) >= lam))


@dataclass
class TailEstimate:
    """Median/min/max of k·μ_k^d over an index window."""

    estimate: float
    lower: float
    upper: float
    window: tuple
    d: int
    sign: str

    @property
    def band(self) -> tuple:
        return (self.lower, self.upper)


def tail_coefficient(
    spec: Spectrum,
    d: int = 1,
    window: tuple | None = None,
    sign: str = "+",
) -> TailEstimate:
    """Estimate lim λ^d n(λ) from the decay of the eigenvalue sequence.

    Since n(λ) ≈ W λ^(-d) means μ_k ≈ (W/k)^(1/d), the products k·μ_k^d are
    asymptotically flat; the median over the window is the estimate and the
    min/max give an honest band.  The default window is [5, n/4] where n
    counts the resolved eigenvalues of the requested branch: a sign-split
    weight resolves each branch only up to its own inertia count, so capping
    by the boundary rank alone would push the window into the range where
    discretisation error dominates.
    """
    branch = np.abs(spec.branch(sign))
    if window is None:
        if spec.boundary_rank is None:
            raise EigensolveError("tail window needed when boundary rank unknown")
        window = (5, max(5, len(branch) // 4))
    kmin, kmax = int(window[0]), int(window[1])
    if kmin < 1 or kmax < kmin:
        raise EigensolveError(f"bad tail window {window}")
    if kmax > len(branch):
        raise EigensolveError(
            f"tail window [{kmin},{kmax}] exceeds resolved count {len(branch)}"
        )
    k = np.arange(kmin, kmax + 1, dtype=float)
    prods = k * branch[kmin - 1 : kmax] ** d
    return TailEstimate(
        estimate=float(np.median(prods)),
        lower=float(prods.min()),
        upper=float(prods.max()),
        window=(kmin, kmax),
        d=d,
        sign=sign,
    )


# ---------------------------------------------------------------------------
# export


def spectrum_to_csv(spec: Spectrum) -> str:
    """CSV with one row per retained pair: index, branch, eigenvalue, residual."""
    out = io.StringIO()
    out.write("index,branch,eigenvalue,residual\n")
    for i, (mu, r) in enumerate(zip(spec.positive, spec.residuals_positive), 1):
        out.write(f"{i},+,{float(mu)!r},{float(r)!r}\n")
    for i, (mu, r) in enumerate(zip(spec.negative, spec.residuals_negative), 1):
        out.write(f"{i},-,{float(mu)!r},{float(r)!r}\n")
    return out.getvalue()


def spectrum_from_csv(text: str) -> Spectrum:
    pos, neg, rp, rn = [], [], [], []
    lines = text.strip().splitlines()
    if lines[0] != "index,branch,eigenvalue,residual":
        raise EigensolveError("not a spectrum CSV")
    for line in lines[1:]:
        _, br, mu, r = line.split(",")
        if br == "+":
            pos.append(float(mu))
            rp.append(float(r))
        else:
            neg.append(float(mu))
            rn.append(float(r))
    return Spectrum(
        np.array(pos), np.array(neg), np.array(rp), np.array(rn),
        "csv", 0.0,
    )
