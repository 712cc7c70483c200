"""Reference values computed independently of the package.

Everything here is derived from closed forms or brute-force numerics that
share no code with ``steklovlab``: Bessel recurrences for the disk pencil,
ellipsoid volumes by Monte Carlo, dense tensor quadrature for single-element
energy integrals, and synthetic eigenvalue sequences with known tails.
"""

import numpy as np
from scipy.special import iv


# ---------------------------------------------------------------------------
# disk pencil: -div(grad u) + v0 u = 0 inside, du/dn = sigma u on the circle.
# Separation in polar coordinates gives u = I_k(sqrt(v0) r) e^{i k theta} and
#
#   sigma_k = sqrt(v0) I_k'(sqrt(v0) R) / I_k(sqrt(v0) R),
#
# with I_0' = I_1 and I_k' = (I_{k-1} + I_{k+1})/2.  The pencil eigenvalues
# are mu = 1/sigma, ordered decreasing; k = 0 is simple, k >= 1 double.


def disk_dtn_eigenvalue(k: int, v0: float = 1.0, radius: float = 1.0) -> float:
    x = np.sqrt(v0) * radius
    if k == 0:
        deriv = iv(1, x)
    else:
        deriv = 0.5 * (iv(k - 1, x) + iv(k + 1, x))
    return float(np.sqrt(v0) * deriv / iv(k, x))


def disk_pencil_eigenvalues(count: int, v0: float = 1.0, radius: float = 1.0):
    """First ``count`` reciprocals 1/sigma_k with multiplicity, decreasing."""
    mus = [1.0 / disk_dtn_eigenvalue(0, v0, radius)]
    k = 1
    while len(mus) < count:
        m = 1.0 / disk_dtn_eigenvalue(k, v0, radius)
        mus.extend([m, m])
        k += 1
    return np.array(mus[:count])


# Frozen evaluations of the above for v0 = 1, R = 1 (12 digits).
DISK_V1_MU = np.array(
    [
        2.240193723870,
        0.806325641513,
        0.806325641513,
        0.462255430177,
        0.462255430177,
        0.320156819045,
        0.320156819045,
        0.243951325537,
        0.243951325537,
    ]
)
# #{mu >= 1/10.5} for the same pencil: k = 0 plus ten double modes.
DISK_V1_COUNT_AT_10_5 = 21


# ---------------------------------------------------------------------------
# unit-circle layer operators.  In the Fourier basis e^{i k theta} the
# single layer has eigenvalues 1/(2|k|) (logarithmic capacity mode at k = 0)
# and the double layer vanishes on mean-zero densities, so the
# Neumann-to-Dirichlet map has eigenvalues 1/|k|.


def circle_single_layer_eigenvalue(k: int) -> float:
    if k == 0:
        raise ValueError("k = 0 is the capacity mode, not a Fourier pair")
    return 1.0 / (2.0 * abs(k))


def circle_nd_eigenvalue(k: int) -> float:
    if k == 0:
        raise ValueError("constants are quotiented out of the ND map")
    return 1.0 / abs(k)


# ---------------------------------------------------------------------------
# ellipsoid volume: vol{xi in R^m : xi^T Q xi <= r^2} for SPD Q equals
# omega_m r^m det(Q)^{-1/2}.  Monte Carlo over a bounding box gives an
# estimate that is independent of that closed form.


def ellipsoid_volume_mc(Q, r: float, n: int = 1_000_000, seed: int = 7) -> float:
    Q = np.asarray(Q, dtype=float)
    m = Q.shape[0]
    # bounding half-widths: |xi_i| <= r / sqrt(min eig) is enough
    half = r / np.sqrt(np.linalg.eigvalsh(Q).min())
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-half, half, size=(n, m))
    inside = np.einsum("ni,ij,nj->n", pts, Q, pts) <= r * r
    return float(inside.mean() * (2.0 * half) ** m)


# ---------------------------------------------------------------------------
# single-element energy integral by dense midpoint quadrature.  Subdivides
# the triangle into 4**levels congruent pieces and sums centroid values;
# the integrand is evaluated through plain lambdas, no package code.


def element_energy_brute(tri, grad_u, grad_w, a_fn, levels: int = 6) -> float:
    tri = np.asarray(tri, dtype=float)
    verts = [
        (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    ]
    for _ in range(levels):
        nxt = []
        for v0, v1, v2 in verts:
            m01, m12, m20 = 0.5 * (v0 + v1), 0.5 * (v1 + v2), 0.5 * (v2 + v0)
            nxt += [
                (v0, m01, m20),
                (m01, v1, m12),
                (m20, m12, v2),
                (m01, m12, m20),
            ]
        verts = nxt
    bary = np.array([(v0 + v1 + v2) / 3.0 for v0, v1, v2 in verts])
    pts = bary @ tri
    e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
    area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
    w = area / len(verts)
    a = a_fn(pts)
    gu = np.asarray(grad_u, dtype=float)
    gw = np.asarray(grad_w, dtype=float)
    return float(np.einsum("nij,j,i->n", a, gu, gw).sum() * w)


# ---------------------------------------------------------------------------
# synthetic spectra with prescribed tails: mu_k = (W/k)^(1/d) makes
# lambda^d n(lambda) converge to exactly W.


def synthetic_tail_sequence(W: float, d: int, count: int) -> np.ndarray:
    k = np.arange(1, count + 1, dtype=float)
    return (W / k) ** (1.0 / d)
