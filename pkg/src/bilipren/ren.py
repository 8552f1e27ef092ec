"""Recurrent equilibrium network state-space core.

A REN is the feedback interconnection of a linear state-space block and a
scalar slope-restricted activation applied componentwise:

    x_{t+1} = A x_t + B1 w_t + B2 u_t + bx
    v_t     = C1 x_t + D11 w_t + D12 u_t + bv
    y_t     = C2 x_t + D21 w_t + D22 u_t + by
    w_t     = act(v_t)

The implicit layer ``w = act(D11 w + bw)`` is solved exactly by forward
substitution when D11 is strictly lower triangular (acyclic networks), or
iteratively otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EquilibriumError(RuntimeError):
    """Implicit layer failed to reach the requested residual."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"equilibrium solve stalled at residual {residual:.3e} "
            f"after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations


# ---------------------------------------------------------------------------
# activations


@dataclass(frozen=True)
class Activation:
    """Scalar activation with slope contained in [0, 1]."""

    name: str
    fn: callable
    deriv: callable

    def __call__(self, v):
        return self.fn(v)


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


ACTIVATIONS = {
    "relu": Activation("relu", lambda v: np.maximum(v, 0.0), lambda v: (v > 0).astype(float)),
    "tanh": Activation("tanh", np.tanh, lambda v: 1.0 - np.tanh(v) ** 2),
    "sigmoid": Activation("sigmoid", _sigmoid, lambda v: _sigmoid(v) * (1.0 - _sigmoid(v))),
}


def get_activation(act) -> Activation:
    if isinstance(act, Activation):
        return act
    try:
        return ACTIVATIONS[act]
    except KeyError:
        raise ValueError(f"unknown activation {act!r}; choose from {sorted(ACTIVATIONS)}")


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class RenDims:
    """State, neuron and channel counts.  Input and output share one width."""

    n: int
    q: int
    m: int

    def __post_init__(self):
        if self.n < 0 or self.q < 0:
            raise ValueError("state and neuron counts must be nonnegative")
        if self.m < 1:
            raise ValueError("channel width must be at least 1")


@dataclass
class RenWeights:
    """Full weight and bias set of a REN block."""

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    C2: np.ndarray
    D21: np.ndarray
    D22: np.ndarray
    bx: np.ndarray
    bv: np.ndarray
    by: np.ndarray
    activation: str = "relu"
    acyclic: bool = True

    def __post_init__(self):
        # contiguous copies keep BLAS code paths, hence simulations, bitwise
        # reproducible across serialization round trips
        for name in ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22"):
            setattr(self, name, np.ascontiguousarray(
                np.atleast_2d(np.asarray(getattr(self, name), dtype=float))))
        for name in ("bx", "bv", "by"):
            setattr(self, name, np.ascontiguousarray(
                np.atleast_1d(np.asarray(getattr(self, name), dtype=float))))
        n, q, m = self.dims.n, self.dims.q, self.dims.m
        expected = {
            "A": (n, n), "B1": (n, q), "B2": (n, m),
            "C1": (q, n), "D11": (q, q), "D12": (q, m),
            "C2": (m, n), "D21": (m, q), "D22": (m, m),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape and not (0 in shape and 0 in got):
                # normalize degenerate atleast_2d shapes like (1, 0) -> (0, k)
                if getattr(self, name).size == 0:
                    setattr(self, name, np.zeros(shape))
                else:
                    raise ValueError(f"weight {name} has shape {got}, expected {shape}")
        if self.bv.shape != (q,) or self.bx.shape != (n,) or self.by.shape != (m,):
            raise ValueError("bias shapes inconsistent with matrix shapes")
        if self.acyclic and q > 0 and np.triu(self.D11).any():
            raise ValueError("acyclic weights require a strictly lower-triangular D11")

    @property
    def dims(self) -> RenDims:
        n = self.A.shape[0]
        m = self.D22.shape[0]
        q = self.D11.shape[0] if self.D11.size else max(self.B1.shape[1], self.C1.shape[0])
        return RenDims(n=n, q=q, m=m)


@dataclass
class EquilibriumConfig:
    """How to solve the implicit layer."""

    mode: str = "acyclic-exact"
    max_iters: int = 500
    tol: float = 1e-10
    damping: float = 0.5

    def __post_init__(self):
        if self.mode not in ("acyclic-exact", "fixed-point"):
            raise ValueError(f"unknown equilibrium mode {self.mode!r}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


# ---------------------------------------------------------------------------
# equilibrium layer


def _solve_acyclic(D11, bw, act: Activation) -> np.ndarray:
    q = bw.shape[0]
    w = np.zeros(q)
    for i in range(q):
        # full-row dot: zeros above the diagonal contribute exact zeros, so
        # re-evaluating the residual reproduces the same floats bit for bit
        w[i] = act.fn(float(D11[i] @ w) + bw[i])
    return w


def _residual(w, D11, bw, act: Activation) -> float:
    return float(np.abs(w - act.fn(D11 @ w + bw)).max()) if w.size else 0.0


def _newton_refine(w, D11, bw, act: Activation, tol: float, max_iters: int = 50):
    """Semismooth Newton on F(w) = w - act(D11 w + bw).

    The Jacobian I - diag(act'(v)) D11 is nonsingular whenever the layer is
    well posed, so the step is always defined; a backtracking line search
    keeps the residual monotone.
    """
    q = w.shape[0]
    eye = np.eye(q)
    res = _residual(w, D11, bw, act)
    for it in range(max_iters):
        if res <= tol:
            return w, res
        v = D11 @ w + bw
        F = w - act.fn(v)
        Jac = eye - act.deriv(v)[:, None] * D11
        try:
            step = np.linalg.solve(Jac, F)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(Jac, F, rcond=None)
        t = 1.0
        while t > 1e-8:
            w_new = w - t * step
            res_new = _residual(w_new, D11, bw, act)
            if res_new < res:
                w, res = w_new, res_new
                break
            t *= 0.5
        else:
            break
    return w, res


def equilibrium_solve(w0, D11, bw, act="relu", cfg: EquilibriumConfig | None = None) -> np.ndarray:
    """Solve ``w = act(D11 w + bw)`` for the neuron activations.

    In ``acyclic-exact`` mode D11 must be strictly lower triangular and the
    solution is obtained by one pass of forward substitution (zero residual).
    In ``fixed-point`` mode a damped iteration
    ``w <- (1 - damping) w + damping act(D11 w + bw)`` runs first, with a
    Newton refinement taking over if the iteration stalls or runs out of
    budget.  Raises :class:`EquilibriumError` if the residual never reaches
    ``cfg.tol``.
    """
    act = get_activation(act)
    cfg = cfg or EquilibriumConfig()
    D11 = np.atleast_2d(np.asarray(D11, dtype=float))
    bw = np.atleast_1d(np.asarray(bw, dtype=float))
    q = bw.shape[0]
    if q == 0:
        return np.zeros(0)
    if D11.shape != (q, q):
        raise ValueError(f"D11 shape {D11.shape} inconsistent with bias length {q}")

    if cfg.mode == "acyclic-exact":
        if np.triu(D11).any():
            raise ValueError("acyclic-exact mode requires strictly lower-triangular D11")
        return _solve_acyclic(D11, bw, act)

    w = np.zeros(q) if w0 is None else np.array(w0, dtype=float)
    gamma = cfg.damping
    res = _residual(w, D11, bw, act)
    worse = 0
    picard_budget = min(40, cfg.max_iters)
    for it in range(picard_budget):
        if res <= cfg.tol:
            return w
        w_next = (1.0 - gamma) * w + gamma * act.fn(D11 @ w + bw)
        res_next = _residual(w_next, D11, bw, act)
        worse = worse + 1 if res_next >= res else 0
        w, res = w_next, res_next
        if worse >= 5:
            break  # the damped map is not contracting here; switch to Newton
    if res <= cfg.tol:
        return w
    w, res = _newton_refine(w, D11, bw, act, cfg.tol)
    if res > cfg.tol:
        # Newton stalled (rare); spend the remaining damped budget
        for it in range(cfg.max_iters - picard_budget):
            if res <= cfg.tol:
                return w
            w = (1.0 - gamma) * w + gamma * act.fn(D11 @ w + bw)
            res = _residual(w, D11, bw, act)
    if res > cfg.tol:
        raise EquilibriumError(res, cfg.max_iters)
    return w


# ---------------------------------------------------------------------------
# recursion


def _default_cfg(wts: RenWeights, cfg: EquilibriumConfig | None) -> EquilibriumConfig:
    if cfg is not None:
        return cfg
    mode = "acyclic-exact" if wts.acyclic else "fixed-point"
    return EquilibriumConfig(mode=mode, tol=1e-12)


def _step(wts: RenWeights, x, u, act: Activation, cfg: EquilibriumConfig, w0):
    bw = wts.C1 @ x + wts.D12 @ u + wts.bv
    w = equilibrium_solve(w0, wts.D11, bw, act, cfg)
    x_next = wts.A @ x + wts.B1 @ w + wts.B2 @ u + wts.bx
    y = wts.C2 @ x + wts.D21 @ w + wts.D22 @ u + wts.by
    return x_next, y, w


def ren_step(wts: RenWeights, x, u, act=None, cfg: EquilibriumConfig | None = None):
    """One step of the REN recursion; returns ``(x_next, y)``."""
    act = get_activation(act if act is not None else wts.activation)
    cfg = _default_cfg(wts, cfg)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    x_next, y, _ = _step(wts, x, u, act, cfg, None)
    return x_next, y


def ren_simulate(wts: RenWeights, x0, u_seq, act=None, cfg: EquilibriumConfig | None = None):
    """Run the recursion over an input sequence.

    ``u_seq`` has shape (T, m) with T >= 1.  Returns ``(y_seq, x_seq)`` with
    shapes (T, m) and (T + 1, n); the state sequence includes the initial
    state.
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if u_seq.shape[0] == 0:
        raise ValueError("input sequence must be nonempty")
    act = get_activation(act if act is not None else wts.activation)
    cfg = _default_cfg(wts, cfg)
    n = wts.dims.n
    x = np.zeros(n) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    ys = np.empty((u_seq.shape[0], wts.dims.m))
    xs = np.empty((u_seq.shape[0] + 1, n))
    xs[0] = x
    w_prev = None
    for t, u in enumerate(u_seq):
        x, y, w_prev = _step(wts, x, u, act, cfg, w_prev)
        ys[t] = y
        xs[t + 1] = x
    return ys, xs


def zero_weights(dims: RenDims, activation: str = "relu") -> RenWeights:
    """All-zero weight set of the given dimensions (useful in tests)."""
    n, q, m = dims.n, dims.q, dims.m
    return RenWeights(
        A=np.zeros((n, n)), B1=np.zeros((n, q)), B2=np.zeros((n, m)),
        C1=np.zeros((q, n)), D11=np.zeros((q, q)), D12=np.zeros((q, m)),
        C2=np.zeros((m, n)), D21=np.zeros((m, q)), D22=np.zeros((m, m)),
        bx=np.zeros(n), bv=np.zeros(q), by=np.zeros(m),
        activation=activation,
    )
