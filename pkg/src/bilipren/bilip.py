"""Certified parameterization, verification and inversion of REN blocks.

The central objects are a direct parameterization (any finite flat vector
maps to weights whose dissipation certificate holds by construction), an
independent verifier that assembles the certificate matrix and reports its
smallest eigenvalue, and the closed-form inverse realization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import autodiff
from .linalg import min_eig_sym, sv_extremes
from .ren import RenDims, RenWeights


class InversionError(RuntimeError):
    """Feedthrough block too ill-conditioned to invert."""


#: condition-number cutoff for inverting the feedthrough block
D22_CONDITION_LIMIT = 1e12


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class BiLipHyper:
    """Gain interval, contraction rate and sizes of one certified block."""

    mu: float
    nu: float
    dims: RenDims
    alpha_bar: float = 0.9
    eps: float = 1e-6
    activation: str = "relu"

    def __post_init__(self):
        if not (0 < self.mu < self.nu):
            raise ValueError(f"need 0 < mu < nu, got ({self.mu}, {self.nu})")
        if not (0 < self.alpha_bar < 1):
            raise ValueError(f"contraction rate must lie in (0, 1), got {self.alpha_bar}")
        if self.eps <= 0:
            raise ValueError("strict-positivity margin must be positive")


@dataclass(frozen=True)
class SupplyConstants:
    """Coefficients of the incremental supply rate for a gain interval."""

    xi: float
    rho: float


@dataclass
class Certificate:
    """Proof object for one certified block.

    ``P`` is the contraction metric, ``Lambda`` the diagonal multiplier
    (stored as its diagonal), ``lmi_min_eig`` the verified margin of the
    dissipation matrix, ``kappa`` the overshoot sqrt(cond(P)) in the
    identity metric, and ``alpha_bar`` the certified contraction rate.
    """

    P: np.ndarray
    Lambda: np.ndarray
    lmi_min_eig: float
    kappa: float
    alpha_bar: float
    mu: float
    nu: float


# ---------------------------------------------------------------------------
# supply rate and feedthrough interval


def supply_constants(mu: float, nu: float) -> SupplyConstants:
    """Supply-rate coefficients xi = 2 mu nu / (mu + nu), rho = 2 / (mu + nu)."""
    if not (0 < mu <= nu):
        raise ValueError(f"need 0 < mu <= nu, got ({mu}, {nu})")
    return SupplyConstants(xi=2.0 * mu * nu / (mu + nu), rho=2.0 / (mu + nu))


def d22_from_ball(N_free, mu: float, nu: float, margin: float = 0.99) -> np.ndarray:
    """Feedthrough matrix strictly inside the certified gain interval.

    Returns ``D22 = ((mu + nu)/2) (I + r * margin * N_hat)`` with
    ``r = (nu - mu)/(mu + nu)`` and ``N_hat = N_free / (||N_free||_2 + 1)``,
    which keeps ``||(2/(mu+nu)) D22 - I||_2 < r`` so the static part of the
    certificate is positive.  With ``mu == nu`` the interval collapses and
    the center is returned regardless of ``N_free``.
    """
    if not (0 < margin < 1):
        raise ValueError("margin must lie strictly between 0 and 1")
    if not (0 < mu <= nu):
        raise ValueError(f"need 0 < mu <= nu, got ({mu}, {nu})")
    N = np.atleast_2d(np.asarray(N_free, dtype=float))
    if N.shape[0] != N.shape[1]:
        raise ValueError("N_free must be square")
    r = (nu - mu) / (mu + nu)
    _, sig_max = sv_extremes(N)
    N_hat = N / (sig_max + 1.0)
    m = N.shape[0]
    return 0.5 * (mu + nu) * (np.eye(m) + r * margin * N_hat)


# ---------------------------------------------------------------------------
# parameterization


def theta_layout(dims: RenDims) -> dict:
    """Documented layout of the flat parameter vector for one block."""
    return autodiff.theta_layout(dims.n, dims.q, dims.m)


def theta_size(dims: RenDims) -> int:
    return autodiff.theta_size(dims.n, dims.q, dims.m)


def direct_parameterize(theta, hyper: BiLipHyper) -> tuple[RenWeights, Certificate]:
    """Map a flat unconstrained vector to certified weights.

    Total by construction: every finite ``theta`` yields weights whose
    dissipation matrix is an explicit Gram factor, hence positive definite.
    The returned certificate carries the independently verified margin.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    dims = hyper.dims
    if theta.shape[0] != theta_size(dims):
        raise ValueError(
            f"theta has length {theta.shape[0]}, expected {theta_size(dims)}"
        )
    with torch.no_grad():
        tW = autodiff.build_ren_weights(
            torch.from_numpy(theta), dims.n, dims.q, dims.m,
            hyper.mu, hyper.nu, hyper.alpha_bar, hyper.eps,
        )
    W = {k: v.numpy().copy() for k, v in tW.items()}
    wts = RenWeights(
        A=W["A"], B1=W["B1"], B2=W["B2"], C1=W["C1"], D11=W["D11"], D12=W["D12"],
        C2=W["C2"], D21=W["D21"], D22=W["D22"], bx=W["bx"], bv=W["bv"], by=W["by"],
        activation=hyper.activation, acyclic=True,
    )
    cert = make_certificate(wts, W["P"], W["lam"], hyper)
    return wts, cert


def make_certificate(wts: RenWeights, P: np.ndarray, lam: np.ndarray,
                     hyper: BiLipHyper) -> Certificate:
    """Assemble and verify a certificate for given weights and metric."""
    margin = verify_lmi(wts, P, lam, hyper.mu, hyper.nu, hyper.alpha_bar)
    return Certificate(
        P=np.asarray(P, dtype=float),
        Lambda=np.asarray(lam, dtype=float).reshape(-1),
        lmi_min_eig=margin,
        kappa=overshoot_from_metric(P) if P.size else 1.0,
        alpha_bar=hyper.alpha_bar,
        mu=hyper.mu,
        nu=hyper.nu,
    )


# ---------------------------------------------------------------------------
# verification


def _lambda_matrix(Lambda, q: int) -> np.ndarray:
    Lam = np.asarray(Lambda, dtype=float)
    if Lam.ndim == 1:
        if Lam.shape[0] != q:
            raise ValueError(f"Lambda diagonal has length {Lam.shape[0]}, expected {q}")
        return np.diag(Lam)
    if Lam.shape != (q, q):
        raise ValueError(f"Lambda has shape {Lam.shape}, expected ({q}, {q})")
    off = Lam - np.diag(np.diagonal(Lam))
    if np.abs(off).max(initial=0.0) > 0:
        raise ValueError("Lambda must be diagonal")
    return Lam


def assemble_lmi(wts: RenWeights, P, Lambda, mu: float, nu: float,
                 alpha_bar: float = 0.9) -> np.ndarray:
    """Dissipation matrix whose positive definiteness certifies the block.

    Block structure over (state, neuron, channel) increments: the constant
    part couples the metric, the multiplier and the output weights; the
    subtracted quadratics account for the state update energy and the
    weighted output energy of the supply rate.
    """
    n, q, m = wts.dims.n, wts.dims.q, wts.dims.m
    sc = supply_constants(mu, nu)
    P = np.atleast_2d(np.asarray(P, dtype=float)) if n > 0 else np.zeros((0, 0))
    if P.shape != (n, n):
        raise ValueError(f"P has shape {P.shape}, expected ({n}, {n})")
    Lam = _lambda_matrix(Lambda, q) if q > 0 else np.zeros((0, 0))
    k = n + q + m
    T = np.zeros((k, k))
    T[:n, :n] = alpha_bar ** 2 * P
    T[:n, n:n + q] = -wts.C1.T @ Lam
    T[n:n + q, :n] = T[:n, n:n + q].T
    T[n:n + q, n:n + q] = 2.0 * Lam - Lam @ wts.D11 - wts.D11.T @ Lam
    T[:n, n + q:] = wts.C2.T
    T[n + q:, :n] = wts.C2
    T[n:n + q, n + q:] = wts.D21.T - Lam @ wts.D12
    T[n + q:, n:n + q] = T[n:n + q, n + q:].T
    T[n + q:, n + q:] = -sc.xi * np.eye(m) + wts.D22 + wts.D22.T
    G = np.hstack([wts.A, wts.B1, wts.B2])
    Y = np.hstack([wts.C2, wts.D21, wts.D22])
    M = T - G.T @ P @ G - sc.rho * (Y.T @ Y)
    return 0.5 * (M + M.T)


def verify_lmi(wts: RenWeights, P, Lambda, mu: float, nu: float,
               alpha_bar: float = 0.9) -> float:
    """Smallest eigenvalue of the dissipation matrix; positive means certified."""
    return min_eig_sym(assemble_lmi(wts, P, Lambda, mu, nu, alpha_bar))


def wellposedness_margin(wts: RenWeights, Lambda) -> float:
    """Smallest eigenvalue of 2 Lambda - Lambda D11 - D11^T Lambda."""
    q = wts.dims.q
    Lam = _lambda_matrix(Lambda, q)
    if q == 0:
        return np.inf
    return min_eig_sym(2.0 * Lam - Lam @ wts.D11 - wts.D11.T @ Lam)


# ---------------------------------------------------------------------------
# inversion and overshoot


def invert_ren(wts: RenWeights) -> RenWeights:
    """Closed-form inverse realization: swap the roles of input and output.

    Requires an invertible feedthrough block (guaranteed for certified
    weights); raises :class:`InversionError` past the condition cutoff.
    The inverse generally has a dense implicit layer, so its ``acyclic``
    flag is recomputed from the actual sparsity.
    """
    sig_min, sig_max = sv_extremes(wts.D22)
    if sig_min == 0.0 or sig_max / sig_min > D22_CONDITION_LIMIT:
        raise InversionError(
            f"feedthrough condition {sig_max / max(sig_min, 1e-300):.3e} "
            f"exceeds limit {D22_CONDITION_LIMIT:.0e}"
        )
    m = wts.dims.m
    Dinv = np.linalg.solve(wts.D22, np.eye(m))
    D11_hat = wts.D11 - wts.D12 @ Dinv @ wts.D21
    return RenWeights(
        A=wts.A - wts.B2 @ Dinv @ wts.C2,
        B1=wts.B1 - wts.B2 @ Dinv @ wts.D21,
        B2=wts.B2 @ Dinv,
        C1=wts.C1 - wts.D12 @ Dinv @ wts.C2,
        D11=D11_hat,
        D12=wts.D12 @ Dinv,
        C2=-Dinv @ wts.C2,
        D21=-Dinv @ wts.D21,
        D22=Dinv,
        bx=wts.bx - wts.B2 @ (Dinv @ wts.by),
        bv=wts.bv - wts.D12 @ (Dinv @ wts.by),
        by=-Dinv @ wts.by,
        activation=wts.activation,
        acyclic=bool(wts.dims.q == 0 or not np.triu(D11_hat).any()),
    )


def overshoot_from_metric(P) -> float:
    """Transient amplification sqrt(sigma_max(P) / sigma_min(P)) of a metric."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.size == 0:
        return 1.0
    if min_eig_sym(P) <= 0:
        raise ValueError("metric must be positive definite")
    sig_min, sig_max = sv_extremes(P)
    return float(np.sqrt(sig_max / sig_min))
