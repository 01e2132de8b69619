"""Operator algebra of a single oscillator mode on a truncated Fock space.

All operators are dense complex ``numpy`` arrays of shape ``(n, n)`` where
``n`` is the number of retained Fock levels ``|0>, ..., |n-1>``. Matrices
returned by :func:`operator_set` are cached per dimension and flagged
read-only so they can be shared between workers.

Identities that hold in the infinite space (``[x, p] = i``,
``x**2 + p**2 = 2 c^dag c + 1``) are broken only in the last row/column
block by the truncation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "OperatorSet",
    "annihilation",
    "anticommutator",
    "check_dim",
    "commutator",
    "creation",
    "dissipator",
    "hamiltonian",
    "hermitian_part",
    "number",
    "operator_set",
    "quadratures",
]


def check_dim(dim: int) -> int:
    """Validate a Fock dimension and return it as ``int``."""
    if isinstance(dim, bool) or int(dim) != dim:
        raise ValueError(f"Fock dimension must be an integer, got {dim!r}")
    dim = int(dim)
    if dim < 2:
        raise ValueError(f"Fock dimension must be >= 2, got {dim}")
    return dim


def annihilation(dim: int) -> np.ndarray:
    """Ladder operator ``c`` with ``<m|c|n> = sqrt(n) delta_{m,n-1}``."""
    dim = check_dim(dim)
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1).astype(complex)


def creation(dim: int) -> np.ndarray:
    return annihilation(dim).conj().T.copy()


def number(dim: int) -> np.ndarray:
    dim = check_dim(dim)
    return np.diag(np.arange(dim, dtype=float)).astype(complex)


def quadratures(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x, p)`` with ``x = (c^dag + c)/sqrt 2``, ``p = i(c^dag - c)/sqrt 2``."""
    c = annihilation(dim)
    cd = c.conj().T
    x = (cd + c) / np.sqrt(2.0)
    p = 1j * (cd - c) / np.sqrt(2.0)
    return x, p


def hamiltonian(dim: int, omega: float = 1.0) -> np.ndarray:
    """Oscillator Hamiltonian ``omega (c^dag c + 1/2)`` in units with hbar = 1."""
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega!r}")
    dim = check_dim(dim)
    return omega * np.diag(np.arange(dim, dtype=float) + 0.5).astype(complex)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def anticommutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b + b @ a


def hermitian_part(op: np.ndarray) -> np.ndarray:
    """``(O + O^dag) / 2`` over the last two axes."""
    return 0.5 * (op + np.swapaxes(op, -1, -2).conj())


def dissipator(L: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Lindblad dissipator ``L rho L^dag - (L^dag L rho + rho L^dag L)/2``."""
    L = np.asarray(L)
    rho = np.asarray(rho)
    if L.shape != rho.shape[-2:] or L.shape[0] != L.shape[1]:
        raise ValueError(f"shape mismatch: L {L.shape} vs rho {rho.shape}")
    Ld = L.conj().T
    LdL = Ld @ L
    return L @ rho @ Ld - 0.5 * (LdL @ rho + rho @ LdL)


@dataclass(frozen=True)
class OperatorSet:
    """Fixed operators for one Fock dimension (read-only arrays)."""

    dim: int
    c: np.ndarray
    cd: np.ndarray
    x: np.ndarray
    p: np.ndarray
    n: np.ndarray
    identity: np.ndarray


@lru_cache(maxsize=32)
def operator_set(dim: int) -> OperatorSet:
    dim = check_dim(dim)
    c = annihilation(dim)
    x, p = quadratures(dim)
    ops = OperatorSet(
        dim=dim,
        c=c,
        cd=c.conj().T.copy(),
        x=x,
        p=p,
        n=number(dim),
        identity=np.eye(dim, dtype=complex),
    )
    for arr in (ops.c, ops.cd, ops.x, ops.p, ops.n, ops.identity):
        arr.setflags(write=False)
    return ops
