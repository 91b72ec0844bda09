"""Spectral-multiplier graph convolution and its gradients.

Shapes used throughout::

    f, df   (S, I, N)   samples x input channels x vertices
    y, dy   (S, O, N)
    k, dk   (I, O, N)   one spectral multiplier per channel pair
    k_hat   (I, O, M)   tracked weights, k = phi @ k_hat along the last axis
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from gcnn.errors import InvalidArgument
from gcnn.spectral import SpectralBasis

KNOT_DOMAINS = ("rank", "value")


@dataclass(frozen=True, eq=False)
class Interpolator:
    """``phi`` (N x M) maps M tracked weights onto N spectral bins."""

    phi: np.ndarray
    knots: np.ndarray
    queries: np.ndarray

    @property
    def m(self) -> int:
        return self.phi.shape[1]

    @property
    def n(self) -> int:
        return self.phi.shape[0]


def natural_spline_basis(knots: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Cardinal natural-cubic-spline basis.

    Column j is the natural cubic spline through ``knots`` that is 1 at
    knot j and 0 at every other knot, evaluated at ``x`` (which should lie
    inside the knot span).
    """
    knots = np.asarray(knots, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    m = knots.size
    if m == 1:
        return np.ones((x.size, 1))
    h = np.diff(knots)
    if np.any(h <= 0):
        raise InvalidArgument("spline knots must be strictly increasing")

    # second derivatives at the knots for identity data, zero at both ends
    curv = np.zeros((m, m))
    if m > 2:
        ab = np.zeros((3, m - 2))
        ab[0, 1:] = h[1:-1]
        ab[1, :] = 2.0 * (h[:-1] + h[1:])
        ab[2, :-1] = h[1:-1]
        eye = np.eye(m)
        rhs = 6.0 * ((eye[2:] - eye[1:-1]) / h[1:, None] - (eye[1:-1] - eye[:-2]) / h[:-1, None])
        curv[1:-1] = solve_banded((1, 1), ab, rhs)

    seg = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, m - 2)
    x0, x1, hs = knots[seg], knots[seg + 1], h[seg]
    a = (x1 - x)[:, None]
    b = (x - x0)[:, None]
    hs = hs[:, None]
    y0 = np.zeros((x.size, m))
    y1 = np.zeros((x.size, m))
    rows = np.arange(x.size)
    y0[rows, seg] = 1.0
    y1[rows, seg + 1] = 1.0
    c0, c1 = curv[seg], curv[seg + 1]
    out = (c0 * a**3 + c1 * b**3) / (6.0 * hs) + (y0 / hs - c0 * hs / 6.0) * a + (y1 / hs - c1 * hs / 6.0) * b
    return out


def build_interpolator(m: int, n: int, knot_domain: str = "rank", eigenvalues=None) -> Interpolator:
    """Spline interpolator from ``m`` uniformly spaced knots to ``n`` bins.

    With ``knot_domain="rank"`` knots are spread over bin index 1..n; with
    ``"value"`` they are spread over the eigenvalue range and the queries
    are the eigenvalues themselves.  ``m == n`` always yields the identity.
    """
    if not 1 <= m <= n:
        raise InvalidArgument(f"tracked weight count must satisfy 1 <= m <= n, got m={m}, n={n}")
    if knot_domain not in KNOT_DOMAINS:
        raise InvalidArgument(f"unknown knot domain {knot_domain!r}")
    if knot_domain == "rank":
        queries = np.arange(1, n + 1, dtype=np.float64)
    else:
        if eigenvalues is None or len(eigenvalues) != n:
            raise InvalidArgument("value-domain knots need the n eigenvalues")
        queries = np.asarray(eigenvalues, dtype=np.float64)
    lo, hi = queries[0], queries[-1]

    if m == n:
        phi = np.eye(n)
        knots = queries.copy()
    else:
        if m > 1 and hi <= lo:
            raise InvalidArgument("cannot place several knots on a zero-width spectrum")
        knots = np.linspace(lo, hi, m)
        phi = natural_spline_basis(knots, queries)
    phi.setflags(write=False)
    return Interpolator(phi, knots, queries)


def interpolate_filters(interp: Interpolator, k_hat: np.ndarray) -> np.ndarray:
    k_hat = np.asarray(k_hat, dtype=np.float64)
    if k_hat.ndim != 3 or k_hat.shape[-1] != interp.m:
        raise InvalidArgument(f"k_hat must be (I, O, {interp.m}), got {k_hat.shape}")
    return k_hat @ interp.phi.T


def project_filter_grads(interp: Interpolator, dk: np.ndarray) -> np.ndarray:
    """Chain rule through the interpolation: ``phi^T dk`` per channel pair."""
    dk = np.asarray(dk, dtype=np.float64)
    if dk.ndim != 3 or dk.shape[-1] != interp.n:
        raise InvalidArgument(f"dk must be (I, O, {interp.n}), got {dk.shape}")
    return dk @ interp.phi


def _signals(basis: SpectralBasis, x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != basis.n:
        raise InvalidArgument(f"{name} must be (S, C, {basis.n}), got {x.shape}")
    return x


def _filters(basis: SpectralBasis, k, i: int | None = None, o: int | None = None) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 3 or k.shape[-1] != basis.n:
        raise InvalidArgument(f"filters must be (I, O, {basis.n}), got {k.shape}")
    if i is not None and k.shape[0] != i:
        raise InvalidArgument(f"filters expect {k.shape[0]} input channels, signal has {i}")
    if o is not None and k.shape[1] != o:
        raise InvalidArgument(f"filters produce {k.shape[1]} maps, gradient has {o}")
    return k


def spectral_mix(coeffs: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``out[s, o] = sum_i coeffs[s, i] * k[i, o]`` elementwise over bins."""
    if k.shape[0] == 1:
        return coeffs[:, 0, None, :] * k[0][None]
    # one (S x I) @ (I x O) product per bin
    return np.matmul(coeffs.transpose(2, 0, 1), k.transpose(2, 0, 1)).transpose(1, 2, 0)


def spectral_outer(dcoeffs: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """``out[i, o] = sum_s coeffs[s, i] * dcoeffs[s, o]`` elementwise over bins."""
    if coeffs.shape[1] == 1:
        return np.einsum("son,sn->on", dcoeffs, coeffs[:, 0])[None]
    return np.matmul(coeffs.transpose(2, 1, 0), dcoeffs.transpose(2, 0, 1)).transpose(1, 2, 0)


def conv_forward(basis: SpectralBasis, f, k, bias=None) -> np.ndarray:
    """``y[s, o] = U sum_i (U^T f[s, i]) * k[i, o] + bias[o]``."""
    f = _signals(basis, f, "f")
    k = _filters(basis, k, i=f.shape[1])
    y = spectral_mix(f @ basis.U, k) @ basis.U.T
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (k.shape[1],):
            raise InvalidArgument(f"bias must have length {k.shape[1]}, got {bias.shape}")
        y += bias[None, :, None]
    return y


def conv_backward_data(basis: SpectralBasis, dy, k) -> np.ndarray:
    """``df[s, i] = U sum_o (U^T dy[s, o]) * k[i, o]``."""
    dy = _signals(basis, dy, "dy")
    k = _filters(basis, k, o=dy.shape[1])
    return spectral_mix(dy @ basis.U, k.transpose(1, 0, 2)) @ basis.U.T


def conv_backward_filters(basis: SpectralBasis, dy, f) -> np.ndarray:
    """``dk[i, o] = sum_s (U^T dy[s, o]) * (U^T f[s, i])``, left in the spectral domain."""
    dy = _signals(basis, dy, "dy")
    f = _signals(basis, f, "f")
    if dy.shape[0] != f.shape[0]:
        raise InvalidArgument(f"batch sizes differ: dy has {dy.shape[0]}, f has {f.shape[0]}")
    return spectral_outer(dy @ basis.U, f @ basis.U)


def naive_backward_data(basis: SpectralBasis, dy, k) -> np.ndarray:
    """Baseline that skips the forward transform of ``dy``: ``U sum_o dy * k``."""
    dy = _signals(basis, dy, "dy")
    k = _filters(basis, k, o=dy.shape[1])
    return np.einsum("son,ion->sin", dy, k) @ basis.U.T


def naive_backward_filters(basis: SpectralBasis, dy, f) -> np.ndarray:
    """Baseline that multiplies vertex-domain signals: ``sum_s dy * f``."""
    dy = _signals(basis, dy, "dy")
    f = _signals(basis, f, "f")
    if dy.shape[0] != f.shape[0]:
        raise InvalidArgument(f"batch sizes differ: dy has {dy.shape[0]}, f has {f.shape[0]}")
    return np.einsum("son,sin->ion", dy, f)
