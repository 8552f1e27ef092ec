"""Static and dynamic orthogonal affine layers with explicit inverses.

The static layer is an isometry of increments.  The dynamic layer is a
state-space system whose stacked weight matrix is orthogonal, so each step
preserves the combined energy of the state and channel increments; its
inverse runs anti-causally (backwards in time) and is exact once the
terminal state is known.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import cayley

#: allowed orthogonality defect ||Q^T Q - I||_max for layer construction
ORTHO_TOL = 1e-12


@dataclass
class StaticOrtho:
    """Affine map u -> Pk u + qk with an orthogonal matrix Pk."""

    Pk: np.ndarray
    qk: np.ndarray

    def __post_init__(self):
        self.Pk = np.ascontiguousarray(np.atleast_2d(np.asarray(self.Pk, dtype=float)))
        self.qk = np.ascontiguousarray(np.atleast_1d(np.asarray(self.qk, dtype=float)))
        m = self.Pk.shape[0]
        if self.Pk.shape != (m, m) or self.qk.shape != (m,):
            raise ValueError("static layer shapes inconsistent")
        defect = np.abs(self.Pk.T @ self.Pk - np.eye(m)).max()
        if defect > ORTHO_TOL * max(1, m):
            raise ValueError(f"matrix is not orthogonal (defect {defect:.3e})")

    @property
    def m(self) -> int:
        return self.Pk.shape[0]


@dataclass
class DynOrtho:
    """State-space layer whose stacked block matrix [[A,B],[C,D]] is orthogonal."""

    Ak: np.ndarray
    Bk: np.ndarray
    Ck: np.ndarray
    Dk: np.ndarray
    dk: np.ndarray
    wk: np.ndarray

    def __post_init__(self):
        for name in ("Ak", "Bk", "Ck", "Dk"):
            setattr(self, name, np.ascontiguousarray(
                np.atleast_2d(np.asarray(getattr(self, name), dtype=float))))
        self.dk = np.ascontiguousarray(np.atleast_1d(np.asarray(self.dk, dtype=float)))
        self.wk = np.ascontiguousarray(np.atleast_1d(np.asarray(self.wk, dtype=float)))
        p, m = self.p, self.m
        if self.Ak.size == 0:
            self.Ak = np.zeros((p, p))
        if self.Bk.size == 0 and p == 0:
            self.Bk = np.zeros((0, m))
        if self.Ck.size == 0 and p == 0:
            self.Ck = np.zeros((m, 0))
        Q = self.block_matrix()
        defect = np.abs(Q.T @ Q - np.eye(p + m)).max()
        if defect > ORTHO_TOL * max(1, p + m):
            raise ValueError(f"stacked block matrix is not orthogonal (defect {defect:.3e})")

    @property
    def p(self) -> int:
        return self.Ak.shape[0] if self.Ak.size else self.dk.shape[0]

    @property
    def m(self) -> int:
        return self.Dk.shape[0]

    def block_matrix(self) -> np.ndarray:
        return np.block([[self.Ak, self.Bk], [self.Ck, self.Dk]])


def make_static(J, q) -> StaticOrtho:
    """Static orthogonal layer from a free square matrix via the Cayley map."""
    return StaticOrtho(Pk=cayley(J), qk=q)


def make_dyn(J, d_bias, w_bias, p: int, m: int) -> DynOrtho:
    """Dynamic orthogonal layer from a free (p+m) x (p+m) matrix.

    The Cayley image is split into the state/channel blocks; biases are free.
    """
    Q = cayley(J)
    if Q.shape != (p + m, p + m):
        raise ValueError(f"free block has shape {Q.shape}, expected {(p + m, p + m)}")
    return DynOrtho(
        Ak=Q[:p, :p], Bk=Q[:p, p:], Ck=Q[p:, :p], Dk=Q[p:, p:],
        dk=d_bias, wk=w_bias,
    )


def delay_dyn(m: int, steps: int = 1) -> DynOrtho:
    """Exact ``steps``-sample delay as an energy-preserving layer (zero bias)."""
    if steps < 1:
        raise ValueError("delay must be at least one step")
    p = m * steps
    A = np.zeros((p, p))
    if steps > 1:
        A[m:, :-m] = np.eye(p - m)
    B = np.zeros((p, m))
    B[:m, :] = np.eye(m)
    C = np.zeros((m, p))
    C[:, -m:] = np.eye(m)
    return DynOrtho(Ak=A, Bk=B, Ck=C, Dk=np.zeros((m, m)), dk=np.zeros(p), wk=np.zeros(m))


# ---------------------------------------------------------------------------
# evaluation


def static_forward(layer: StaticOrtho, u):
    u = np.asarray(u, dtype=float)
    return u @ layer.Pk.T + layer.qk


def static_inverse(layer: StaticOrtho, y):
    y = np.asarray(y, dtype=float)
    return (y - layer.qk) @ layer.Pk


def dyn_forward(layer: DynOrtho, h0, u_seq):
    """Run the layer forward; returns (y_seq, h_seq) with h_seq of length T+1."""
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    T = u_seq.shape[0]
    p = layer.p
    h = np.zeros(p) if h0 is None else np.atleast_1d(np.asarray(h0, dtype=float)).copy()
    ys = np.empty((T, layer.m))
    hs = np.empty((T + 1, p))
    hs[0] = h
    for t in range(T):
        ys[t] = layer.Ck @ h + layer.Dk @ u_seq[t] + layer.wk
        h = layer.Ak @ h + layer.Bk @ u_seq[t] + layer.dk
        hs[t + 1] = h
    return ys, hs


def dyn_inverse_anticausal(layer: DynOrtho, y_seq, h_terminal):
    """Reconstruct the input by running the transposed recursion backwards.

    ``h_terminal`` is the state at index T+1.  When it equals the true final
    state of the forward pass the round trip is exact; an error of norm
    delta in the terminal state perturbs the reconstructed input by at most
    delta in cumulative energy.
    """
    y_seq = np.atleast_2d(np.asarray(y_seq, dtype=float))
    if y_seq.shape[0] == 0:
        raise ValueError("output sequence must be nonempty")
    T = y_seq.shape[0]
    h = np.atleast_1d(np.asarray(h_terminal, dtype=float)).copy()
    us = np.empty((T, layer.m))
    for t in range(T - 1, -1, -1):
        residual_y = y_seq[t] - layer.wk
        residual_h = h - layer.dk
        us[t] = layer.Bk.T @ residual_h + layer.Dk.T @ residual_y
        h = layer.Ak.T @ residual_h + layer.Ck.T @ residual_y
    return us
