"""Laplacian eigenbasis and the graph Fourier transform."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gcnn.errors import FormatError, InvalidArgument, NumericalFailure

ORTHO_TOL = 1e-10
RESIDUAL_TOL = 1e-8
# entries this close (relative) to the column max count as ties for the sign rule
_SIGN_TIE_RTOL = 1e-9


def matrix_hash(mat: np.ndarray) -> str:
    mat = np.ascontiguousarray(mat, dtype=np.float64)
    h = hashlib.sha256()
    h.update(struct.pack("<QQ", *mat.shape))
    h.update(mat.tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Orthonormal eigenvectors ``U`` (columns) and ascending eigenvalues ``lam``."""

    U: np.ndarray
    lam: np.ndarray
    source_hash: str = ""

    @property
    def n(self) -> int:
        return self.lam.shape[0]


def fix_signs(U: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive.

    Ties (within a relative 1e-9) go to the lowest row index.
    """
    U = np.array(U, dtype=np.float64)
    mag = np.abs(U)
    colmax = mag.max(axis=0)
    is_top = mag >= colmax * (1.0 - _SIGN_TIE_RTOL)
    pivot = np.argmax(is_top, axis=0)
    signs = np.sign(U[pivot, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def eigendecompose(L: np.ndarray) -> SpectralBasis:
    """Full symmetric eigendecomposition with a deterministic sign convention.

    Raises NumericalFailure when the solver does not converge or the
    result violates the orthonormality / residual tolerances.
    """
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise InvalidArgument(f"expected a square matrix, got shape {L.shape}")
    if not np.allclose(L, L.T, rtol=0, atol=1e-12 * max(1.0, np.abs(L).max(initial=0))):
        raise InvalidArgument("matrix is not symmetric")
    try:
        lam, U = np.linalg.eigh(L)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigensolver did not converge: {exc}") from exc

    order = np.argsort(lam, kind="stable")
    lam, U = lam[order], fix_signs(U[:, order])

    n = L.shape[0]
    ortho = np.abs(U.T @ U - np.eye(n)).max()
    scale = max(np.abs(lam).max(), 1.0)
    resid = (np.linalg.norm(L @ U - U * lam, axis=0) / scale).max()
    if ortho > ORTHO_TOL or resid > RESIDUAL_TOL:
        raise NumericalFailure(
            f"eigendecomposition inaccurate: orthogonality error {ortho:.3e}, residual {resid:.3e}",
            residual=float(max(ortho, resid)),
        )
    U.setflags(write=False)
    lam.setflags(write=False)
    return SpectralBasis(U, lam, matrix_hash(L))


class BasisCache:
    """Memoises eigendecompositions by Laplacian content hash."""

    def __init__(self):
        self._store: dict[str, SpectralBasis] = {}

    def get(self, L: np.ndarray) -> SpectralBasis:
        key = matrix_hash(L)
        if key not in self._store:
            self._store[key] = eigendecompose(L)
        return self._store[key]

    def __len__(self):
        return len(self._store)


def _check_len(basis: SpectralBasis, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != basis.n:
        raise InvalidArgument(f"signal length {x.shape[-1]} does not match basis size {basis.n}")
    return x


def gft(basis: SpectralBasis, f: np.ndarray) -> np.ndarray:
    """Forward transform ``U^T f``; operates on the last axis."""
    return _check_len(basis, f) @ basis.U


def igft(basis: SpectralBasis, coeffs: np.ndarray) -> np.ndarray:
    """Inverse transform ``U c``; operates on the last axis."""
    return _check_len(basis, coeffs) @ basis.U.T


def dump_basis(basis: SpectralBasis, path) -> None:
    """Little-endian binary: u64 N, N eigenvalues, then U column-major."""
    n = basis.n
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", n))
        fh.write(np.asarray(basis.lam, dtype="<f8").tobytes())
        fh.write(np.asarray(basis.U, dtype="<f8").tobytes(order="F"))


def load_basis(path) -> SpectralBasis:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header", offset=0)
    (n,) = struct.unpack_from("<Q", raw, 0)
    need = 8 + 8 * (n + n * n)
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes for N={n}, found {len(raw)}", offset=min(len(raw), need))
    lam = np.frombuffer(raw, dtype="<f8", count=n, offset=8).astype(np.float64)
    U = np.frombuffer(raw, dtype="<f8", count=n * n, offset=8 + 8 * n).reshape((n, n), order="F").astype(np.float64)
    return SpectralBasis(U, lam)
