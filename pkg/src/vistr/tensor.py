"""Dense multilinear algebra: unfoldings, mode products and HOSVD.

Tensors are plain C-ordered float64 ``numpy.ndarray`` objects (last index
fastest). Modes are numbered from 0.

Unfolding convention: the mode-``n`` unfolding has shape
``(I_n, prod_{m != n} I_m)`` and its columns enumerate the remaining indices
with the lowest-numbered remaining mode varying fastest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "TuckerFactors",
    "as_tensor",
    "unfold",
    "fold",
    "mode_mul",
    "vec_mul",
    "inner",
    "frobenius",
    "hosvd",
    "tucker_reconstruct",
    "fix_signs",
    "write_ten",
    "read_ten",
]

TEN_MAGIC = b"VTEN"
TEN_VERSION = 1


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array with every extent >= 1."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise ValueError("a tensor needs at least one mode")
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"all extents must be >= 1, got {arr.shape}")
    return arr


def _check_mode(x: np.ndarray, n: int) -> int:
    if not isinstance(n, (int, np.integer)) or not 0 <= n < x.ndim:
        raise ValueError(f"mode {n} out of range for order-{x.ndim} tensor")
    return int(n)


def unfold(x, n: int) -> np.ndarray:
    """Mode-``n`` unfolding (matricization)."""
    x = np.asarray(x, dtype=np.float64)
    n = _check_mode(x, n)
    return np.reshape(np.moveaxis(x, n, 0), (x.shape[n], -1), order="F")


def fold(mat, n: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of extents ``dims``."""
    dims = tuple(int(d) for d in dims)
    if not 0 <= n < len(dims):
        raise ValueError(f"mode {n} out of range for order-{len(dims)} tensor")
    mat = np.asarray(mat, dtype=np.float64)
    rest = dims[:n] + dims[n + 1:]
    expected = (dims[n], int(np.prod(rest, dtype=np.int64)))
    if mat.shape != expected:
        raise ValueError(f"unfolding has shape {mat.shape}, expected {expected}")
    full = np.reshape(mat, (dims[n],) + rest, order="F")
    return np.ascontiguousarray(np.moveaxis(full, 0, n))


def mode_mul(x, u, n: int) -> np.ndarray:
    """Mode-``n`` product ``x ×_n u`` with ``u`` of shape ``(J_n, I_n)``."""
    x = np.asarray(x, dtype=np.float64)
    n = _check_mode(x, n)
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if u.ndim != 2 or u.shape[1] != x.shape[n]:
        raise ValueError(
            f"matrix with {u.shape[-1]} columns cannot multiply mode {n} of extent {x.shape[n]}"
        )
    out = np.tensordot(u, x, axes=(1, n))
    return np.ascontiguousarray(np.moveaxis(out, 0, n))


def vec_mul(x, y, n: int) -> np.ndarray:
    """Contract mode ``n`` of ``x`` against the vector ``y``."""
    x = np.asarray(x, dtype=np.float64)
    n = _check_mode(x, n)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size != x.shape[n]:
        raise ValueError(f"vector of length {y.size} does not match extent {x.shape[n]}")
    return np.ascontiguousarray(np.tensordot(x, y, axes=(n, 0)))


def inner(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.dot(x.ravel(), y.ravel()))


def frobenius(x) -> float:
    return float(np.sqrt(inner(x, x)))


def fix_signs(u: np.ndarray) -> np.ndarray:
    """Flip columns so each column's largest-magnitude entry is positive."""
    u = np.array(u, dtype=np.float64)
    if u.size == 0:
        return u
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


@dataclass
class TuckerFactors:
    """Tucker model ``core ×_0 U0 ×_1 U1 ... ×_{N-1} U{N-1}``.

    ``energy[n]`` is the fraction of the mode-``n`` squared singular values
    kept by ``factors[n]``; ``spectra[n]`` holds all of them (descending).
    ``degenerate`` marks the all-zero input, for which every factor is a
    single zero-core column.
    """

    core: np.ndarray
    factors: list[np.ndarray]
    energy: list[float] = field(default_factory=list)
    spectra: list[np.ndarray] = field(default_factory=list)
    degenerate: bool = False

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(u.shape[1] for u in self.factors)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(u.shape[0] for u in self.factors)

    def discarded(self, n: int) -> float:
        """Sum of mode-``n`` squared singular values dropped by truncation."""
        return float(np.sum(self.spectra[n][self.ranks[n]:]))


def _mode_spectrum(x: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Left singular vectors and squared singular values of unfold(x, n)."""
    xn = unfold(x, n)
    if xn.shape[1] <= 4 * xn.shape[0]:
        u, s, _ = np.linalg.svd(xn, full_matrices=True)
        s2 = np.zeros(xn.shape[0])
        s2[: s.size] = s * s
        return u, s2
    # wide unfolding: eigendecomposition of the (small) Gram matrix
    gram = xn @ xn.T
    w, v = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1]
    return v[:, order], np.clip(w[order], 0.0, None)


def _rank_for_energy(s2: np.ndarray, tau: float) -> int:
    total = s2.sum()
    if total <= 0.0:
        return 1
    frac = np.cumsum(s2) / total
    # small slack so tau=1 is reachable despite rounding in the cumulative sum
    return int(min(np.searchsorted(frac, tau - 1e-12) + 1, s2.size))


def hosvd(x, ranks: Sequence[int | None] | None = None, energy=None) -> TuckerFactors:
    """Truncated higher-order SVD.

    Parameters
    ----------
    x : array_like
        Order-N tensor.
    ranks : sequence of int or None, optional
        Per-mode ranks. ``None`` entries fall back to ``energy`` (or to full
        rank when no energy target is given).
    energy : float or sequence of float, optional
        Per-mode energy targets in (0, 1]; the smallest rank whose cumulative
        squared-singular-value fraction reaches the target is kept.
    """
    x = as_tensor(x)
    order = x.ndim
    if ranks is None:
        ranks = [None] * order
    ranks = list(ranks)
    if len(ranks) != order:
        raise ValueError(f"expected {order} ranks, got {len(ranks)}")
    if energy is None or np.isscalar(energy):
        energy = [energy] * order
    energy = list(energy)
    if len(energy) != order:
        raise ValueError(f"expected {order} energy targets, got {len(energy)}")
    for n, (r, tau) in enumerate(zip(ranks, energy)):
        if r is not None and not 1 <= r <= x.shape[n]:
            raise ValueError(f"rank {r} invalid for mode {n} of extent {x.shape[n]}")
        if tau is not None and not 0.0 < tau <= 1.0:
            raise ValueError(f"energy target {tau} outside (0, 1]")

    if not np.any(x):
        factors = []
        for n in range(order):
            u = np.zeros((x.shape[n], 1))
            u[0, 0] = 1.0
            factors.append(u)
        return TuckerFactors(
            core=np.zeros((1,) * order),
            factors=factors,
            energy=[1.0] * order,
            spectra=[np.zeros(d) for d in x.shape],
            degenerate=True,
        )

    factors, kept, spectra = [], [], []
    for n in range(order):
        u, s2 = _mode_spectrum(x, n)
        r = ranks[n]
        if r is None:
            r = x.shape[n] if energy[n] is None else _rank_for_energy(s2, energy[n])
        factors.append(fix_signs(u[:, :r]))
        spectra.append(s2)
        total = s2.sum()
        kept.append(float(s2[:r].sum() / total) if total > 0 else 1.0)

    core = x
    # contract the modes with the largest reduction first
    for n in sorted(range(order), key=lambda m: factors[m].shape[1] / x.shape[m]):
        core = mode_mul(core, factors[n].T, n)
    return TuckerFactors(core=core, factors=factors, energy=kept, spectra=spectra)


def tucker_reconstruct(f: TuckerFactors) -> np.ndarray:
    core = np.asarray(f.core, dtype=np.float64)
    if core.ndim != len(f.factors):
        raise ValueError(f"core of order {core.ndim} with {len(f.factors)} factors")
    out = core
    for n, u in enumerate(f.factors):
        if u.shape[1] != core.shape[n]:
            raise ValueError(
                f"factor {n} has {u.shape[1]} columns but core extent is {core.shape[n]}"
            )
        out = mode_mul(out, u, n)
    return out


def write_ten(path, x) -> None:
    """Write a ``.ten`` file: b"VTEN", u32 version, u32 order, u32 extents, f64 data (LE)."""
    x = as_tensor(x)
    header = TEN_MAGIC + struct.pack(f"<II{x.ndim}I", TEN_VERSION, x.ndim, *x.shape)
    Path(path).write_bytes(header + x.astype("<f8").tobytes(order="C"))


def read_ten(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TEN_MAGIC:
        raise ValueError(f"{path}: not a .ten file (bad magic)")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    version, order = struct.unpack_from("<II", raw, 4)
    if version != TEN_VERSION:
        raise ValueError(f"{path}: unsupported .ten version {version}")
    if order < 1 or len(raw) < 12 + 4 * order:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{order}I", raw, 12)
    if any(d < 1 for d in dims):
        raise ValueError(f"{path}: zero extent in {dims}")
    offset = 12 + 4 * order
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: payload holds {(len(raw) - offset) // 8} values, expected {count}")
    data = np.frombuffer(raw, dtype="<f8", offset=offset, count=count)
    return data.astype(np.float64).reshape(dims)
