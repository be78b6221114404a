"""Zero-order-hold discretization for a diagonal, strictly negative state matrix."""
import math

import numpy as np

from .._accel import njit
from ..errors import DomainError

EXACT = "exact"
SIMPLIFIED = "simplified"
MODES = (EXACT, SIMPLIFIED)

# Taylor fallback thresholds for expm1(u)/u and its derivative.
PHI_TAYLOR = 1e-4
DPHI_TAYLOR = 1e-1


@njit
def phi(u):
    """expm1(u) / u, with a 4-term series near zero."""
    if abs(u) < PHI_TAYLOR:
        return 1.0 + u * (0.5 + u * (1.0 / 6.0 + u * (1.0 / 24.0)))
    return math.expm1(u) / u


@njit
def dphi(u):
    """d/du of expm1(u)/u. Series below |u| < 0.1 avoids the u**2 cancellation."""
    if abs(u) < DPHI_TAYLOR:
        return (0.5 + u * (1.0 / 3.0 + u * (1.0 / 8.0 + u * (1.0 / 30.0 + u * (
            1.0 / 144.0 + u * (1.0 / 840.0 + u * (1.0 / 5760.0 + u * (1.0 / 45360.0))))))))
    return (u + (u - 1.0) * math.expm1(u)) / (u * u)


def phi_np(u):
    u = np.asarray(u)
    small = np.abs(u) < PHI_TAYLOR
    safe = np.where(small, 1.0, u)
    series = 1.0 + u * (0.5 + u * (1.0 / 6.0 + u * (1.0 / 24.0)))
    return np.where(small, series, np.expm1(safe) / safe)


def dphi_np(u):
    u = np.asarray(u)
    small = np.abs(u) < DPHI_TAYLOR
    safe = np.where(small, 1.0, u)
    series = (0.5 + u * (1.0 / 3.0 + u * (1.0 / 8.0 + u * (1.0 / 30.0 + u * (
        1.0 / 144.0 + u * (1.0 / 840.0 + u * (1.0 / 5760.0 + u * (1.0 / 45360.0))))))))
    return np.where(small, series, (safe + (safe - 1.0) * np.expm1(safe)) / (safe * safe))


def check_mode(mode):
    if mode not in MODES:
        raise DomainError(f"unknown ZOH mode {mode!r}; expected one of {MODES}")
    return mode == EXACT


def zoh_discretize(A_diag, B_t, delta, mode=EXACT):
    """Discretize ``(A, B)`` per token.

    A_diag: [D, N] (strictly negative), B_t: [L, N], delta: [L, D] (> 0).
    Returns ``(A_bar, B_bar)``, both [L, D, N].
    """
    A_diag = np.asarray(A_diag)
    B_t = np.asarray(B_t)
    delta = np.asarray(delta)
    exact = check_mode(mode)
    if np.any(delta <= 0):
        raise DomainError("delta must be strictly positive")
    if np.any(A_diag >= 0):
        raise DomainError("state matrix diagonal must be strictly negative")
    u = delta[:, :, None] * A_diag[None, :, :]
    A_bar = np.exp(u)
    if exact:
        B_bar = delta[:, :, None] * phi_np(u) * B_t[:, None, :]
    else:
        B_bar = delta[:, :, None] * B_t[:, None, :]
    return A_bar.astype(np.result_type(A_diag, delta)), B_bar
