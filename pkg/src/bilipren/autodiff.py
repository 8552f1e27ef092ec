"""Differentiable core shared by the parameterization and the trainer.

Everything here is plain float64 torch with no module state, so gradients
flow from a flat unconstrained parameter vector through the certified
weight construction and the sequence simulations.  The numpy-facing
modules call into this file under ``torch.no_grad`` and re-verify the
results independently.
"""

from __future__ import annotations

import math

import numpy as np
import torch

DTYPE = torch.float64

#: fixed margin split inside the implicit-layer completion, in (0, 2)
_BETA = 1.0
#: shrink applied to the raw coupling block before the contraction map
_B_SCALE = 0.5


def to_t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def cayley_t(J: torch.Tensor) -> torch.Tensor:
    """Orthogonal matrix (I + Z)(I - Z)^{-1}, Z = J^T - J, differentiable."""
    Z = J.T - J
    eye = torch.eye(J.shape[0], dtype=J.dtype)
    return torch.linalg.solve((eye - Z).T, (eye + Z).T).T


# ---------------------------------------------------------------------------
# parameter layout


def theta_layout(n: int, q: int, m: int) -> dict[str, tuple[int, tuple[int, ...]]]:
    """Offsets and shapes of the free blocks inside a flat parameter vector.

    Order: ``L`` (metric factor, n x n), ``d`` (log multipliers, q), ``C1``
    and ``D12`` raw rows (q x n, q x m), ``B`` raw coupling block
    ((n + m) x (n + q + m)), then the free biases ``bx``, ``bv``, ``by``.
    """
    k = n + q + m
    shapes = [
        ("L", (n, n)),
        ("d", (q,)),
        ("C1", (q, n)),
        ("D12", (q, m)),
        ("B", (n + m, k)),
        ("bx", (n,)),
        ("bv", (q,)),
        ("by", (m,)),
    ]
    layout = {}
    offset = 0
    for name, shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        layout[name] = (offset, shape)
        offset += size
    layout["__total__"] = (offset, ())
    return layout


def theta_size(n: int, q: int, m: int) -> int:
    return theta_layout(n, q, m)["__total__"][0]


def _take(theta: torch.Tensor, layout, name: str) -> torch.Tensor:
    offset, shape = layout[name]
    size = int(np.prod(shape)) if shape else 1
    return theta[offset:offset + size].reshape(shape)


# ---------------------------------------------------------------------------
# certified weight construction


def build_ren_weights(theta: torch.Tensor, n: int, q: int, m: int,
                      mu: float, nu: float, alpha_bar: float = 0.9,
                      eps: float = 1e-6) -> dict[str, torch.Tensor]:
    """Map a flat unconstrained vector to certified REN weights.

    The returned weights satisfy the incremental dissipation inequality for
    the gain interval (mu, nu) at contraction rate ``alpha_bar`` for every
    finite input vector: the residual matrix is produced as an explicit Gram
    factor, so its positive definiteness is structural rather than checked.
    Also returns the certificate ingredients ``P`` (metric) and ``lam``
    (diagonal multiplier).
    """
    if not (0 < mu < nu):
        raise ValueError("need 0 < mu < nu")
    if not (0 < alpha_bar < 1):
        raise ValueError("need 0 < alpha_bar < 1")
    theta = to_t(theta).reshape(-1)
    layout = theta_layout(n, q, m)
    if theta.shape[0] != layout["__total__"][0]:
        raise ValueError(
            f"theta has length {theta.shape[0]}, layout needs {layout['__total__'][0]}"
        )
    k = n + q + m
    rho = 2.0 / (mu + nu)
    r = (nu - mu) / (mu + nu)
    eta = r * r / rho

    L = _take(theta, layout, "L")
    d = _take(theta, layout, "d")
    C1_raw = _take(theta, layout, "C1")
    D12_raw = _take(theta, layout, "D12")
    B_raw = _take(theta, layout, "B") * (_B_SCALE / math.sqrt(k))
    bx = _take(theta, layout, "bx")
    bv = _take(theta, layout, "bv")
    by = _take(theta, layout, "by")

    eye_n = torch.eye(n, dtype=DTYPE)
    P = L.T @ L + eps * eye_n
    lam = torch.exp(d)

    # implicit-layer completion: scale the rows of (C1, D12) so the middle
    # Schur complement keeps a diagonal margin, then cancel the remaining
    # off-diagonal coupling with the strictly lower-triangular D11
    if q > 0:
        if n > 0:
            Lp = torch.linalg.cholesky(P)
            Q0_raw = (C1_raw @ torch.cholesky_solve(C1_raw.T, Lp)) / alpha_bar ** 2
        else:
            Lp = None
            Q0_raw = torch.zeros((q, q), dtype=DTYPE)
        Q0_raw = Q0_raw + (D12_raw @ D12_raw.T) / eta
        g = (2.0 - _BETA) / lam
        t = torch.sqrt(g / (torch.diagonal(Q0_raw) + g))
        C1 = t[:, None] * C1_raw
        D12 = t[:, None] * D12_raw
        Q0 = Q0_raw * t[:, None] * t[None, :]
        J = -torch.tril(Q0, diagonal=-1)
        D11 = J * lam[None, :]
        S = 2.0 * torch.diag(1.0 / lam) - J - J.T
    else:
        Lp = torch.linalg.cholesky(P) if n > 0 else None
        C1 = torch.zeros((0, n), dtype=DTYPE)
        D12 = torch.zeros((0, m), dtype=DTYPE)
        D11 = torch.zeros((0, 0), dtype=DTYPE)
        S = torch.zeros((0, 0), dtype=DTYPE)

    eye_m = torch.eye(m, dtype=DTYPE)
    row1 = torch.cat([alpha_bar ** 2 * P, -C1.T, torch.zeros((n, m), dtype=DTYPE)], dim=1)
    row2 = torch.cat([-C1, S, -D12], dim=1)
    row3 = torch.cat([torch.zeros((m, n), dtype=DTYPE), -D12.T, eta * eye_m], dim=1)
    phi_core = torch.cat([row1, row2, row3], dim=0)
    scale = torch.cat([torch.ones(n, dtype=DTYPE), lam, torch.ones(m, dtype=DTYPE)])
    phi = phi_core * scale[:, None] * scale[None, :]

    # contraction map: K = B_s (I + B_s^T B_s)^{-1/2}-style factor applied to
    # the Cholesky factor of phi; the dissipation residual becomes a Gram
    # matrix and stays positive definite for every theta
    L_phi = torch.linalg.cholesky(phi)
    L_b = torch.linalg.cholesky(torch.eye(k, dtype=DTYPE) + B_raw.T @ B_raw)
    contraction = torch.linalg.solve_triangular(L_b, B_raw.T, upper=False).T
    K = contraction @ L_phi.T

    if n > 0:
        G = torch.linalg.solve_triangular(Lp.T, K[:n, :], upper=True)
    else:
        G = torch.zeros((0, k), dtype=DTYPE)
    Y_shift = K[n:, :] / math.sqrt(rho)

    return {
        "A": G[:, :n], "B1": G[:, n:n + q], "B2": G[:, n + q:],
        "C1": C1, "D11": D11, "D12": D12,
        "C2": Y_shift[:, :n], "D21": Y_shift[:, n:n + q],
        "D22": Y_shift[:, n + q:] + eye_m / rho,
        "bx": bx, "bv": bv, "by": by,
        "P": P, "lam": lam,
    }


def invert_weights_t(W: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Closed-form weights of the inverse network (output solved for input)."""
    m = W["D22"].shape[0]
    Dinv = torch.linalg.solve(W["D22"], torch.eye(m, dtype=DTYPE))
    return {
        "A": W["A"] - W["B2"] @ Dinv @ W["C2"],
        "B1": W["B1"] - W["B2"] @ Dinv @ W["D21"],
        "B2": W["B2"] @ Dinv,
        "C1": W["C1"] - W["D12"] @ Dinv @ W["C2"],
        "D11": W["D11"] - W["D12"] @ Dinv @ W["D21"],
        "D12": W["D12"] @ Dinv,
        "C2": -Dinv @ W["C2"],
        "D21": -Dinv @ W["D21"],
        "D22": Dinv,
        "bx": W["bx"] - W["B2"] @ (Dinv @ W["by"]),
        "bv": W["bv"] - W["D12"] @ (Dinv @ W["by"]),
        "by": -Dinv @ W["by"],
    }


# ---------------------------------------------------------------------------
# activations


def activation_t(name: str):
    """Returns (fn, derivative) callables for a supported activation."""
    if name == "relu":
        return torch.relu, lambda v: (v > 0).to(v.dtype)
    if name == "tanh":
        return torch.tanh, lambda v: 1.0 - torch.tanh(v) ** 2
    if name == "sigmoid":
        return torch.sigmoid, lambda v: torch.sigmoid(v) * (1.0 - torch.sigmoid(v))
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# equilibrium layers (batched)


def equilibrium_acyclic_t(D11: torch.Tensor, bw: torch.Tensor, act) -> torch.Tensor:
    """Exact solve for strictly lower-triangular D11; bw is [B, q].

    Each sweep of w <- act(D11 w + bw) finalizes at least one more
    coordinate, so q sweeps reproduce forward substitution exactly.
    """
    q = bw.shape[1]
    w = torch.zeros_like(bw)
    for _ in range(q):
        w = act(w @ D11.T + bw)
    return w


def equilibrium_newton_t(D11: torch.Tensor, bw: torch.Tensor, act, dact,
                         w0: torch.Tensor | None = None,
                         max_iters: int = 40, tol: float = 1e-12) -> torch.Tensor:
    """Batched Newton solve of w = act(D11 w + bw) for dense D11."""
    q = bw.shape[1]
    if q == 0:
        return bw
    w = torch.zeros_like(bw) if w0 is None else w0
    eye = torch.eye(q, dtype=bw.dtype)
    for _ in range(max_iters):
        v = w @ D11.T + bw
        F = w - act(v)
        if float(F.detach().abs().max()) < tol:
            break
        Jb = eye.unsqueeze(0) - dact(v).unsqueeze(-1) * D11.unsqueeze(0)
        w = w - torch.linalg.solve(Jb, F.unsqueeze(-1)).squeeze(-1)
    return w


# ---------------------------------------------------------------------------
# sequence simulation (batched over leading dimension)


def ren_forward_t(W: dict, x0: torch.Tensor, U: torch.Tensor, act_name: str,
                  acyclic: bool = True, newton_tol: float = 1e-12):
    """Simulate a REN over [B, T, m] inputs; returns (Y, final state)."""
    act, dact = activation_t(act_name)
    Bsz, T, _ = U.shape
    x = x0
    ys = []
    w_prev = None
    for t in range(T):
        u = U[:, t, :]
        bw = x @ W["C1"].T + u @ W["D12"].T + W["bv"]
        if acyclic:
            w = equilibrium_acyclic_t(W["D11"], bw, act)
        else:
            w = equilibrium_newton_t(W["D11"], bw, act, dact, w0=w_prev, tol=newton_tol)
            w_prev = w
        ys.append(x @ W["C2"].T + w @ W["D21"].T + u @ W["D22"].T + W["by"])
        x = x @ W["A"].T + w @ W["B1"].T + u @ W["B2"].T + W["bx"]
    return torch.stack(ys, dim=1), x


def static_forward_t(P: torch.Tensor, qb: torch.Tensor, U: torch.Tensor) -> torch.Tensor:
    return U @ P.T + qb


def static_inverse_t(P: torch.Tensor, qb: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    return (Y - qb) @ P


def dyn_forward_t(A, B, C, D, db, wb, h0: torch.Tensor, U: torch.Tensor):
    """Affine state-space layer over [B, T, m] inputs; returns (Y, final h)."""
    h = h0
    ys = []
    for t in range(U.shape[1]):
        u = U[:, t, :]
        ys.append(h @ C.T + u @ D.T + wb)
        h = h @ A.T + u @ B.T + db
    return torch.stack(ys, dim=1), h
