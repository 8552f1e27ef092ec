"""Training, metrics, empirical probes and worst-case search.

Trainable models hold flat unconstrained parameter tensors; every forward
pass rebuilds the certified weights differentiably, so gradient descent
moves through the feasible set only.  Exported snapshots are re-verified
independently.  The probes and bound curves run on the exported numpy
models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import autodiff
from .autodiff import to_t
from .bilip import BiLipHyper, invert_ren
from .compose import (FactorModel, RenBlock, SandwichModel, allocate_bounds,
                      sandwich_forward_states, sandwich_inverse, simulate)
from .linalg import sv_extremes
from .orthogonal import DynOrtho, StaticOrtho
from .plants import Dataset
from .ren import RenDims, RenWeights, get_activation, ren_simulate


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; carries the history accumulated so far."""

    def __init__(self, history):
        super().__init__("training loss diverged")
        self.history = history


class CertificateViolation(AssertionError):
    """A checkpoint failed re-verification.  Unreachable by construction."""


# ---------------------------------------------------------------------------
# configs


@dataclass
class TrainConfig:
    learning_rate: float = 0.02
    steps: int = 200
    batch_size: int = 0
    gradient_mode: str = "reverse-mode"
    # central differences balance truncation against round-off near 1e-5
    # for double-precision losses at this scale
    fd_step: float = 1e-5
    seed: int = 0
    optimizer: str = "gd-halving"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.fd_step <= 0:
            raise ValueError("learning_rate and fd_step must be positive")
        if self.gradient_mode not in ("reverse-mode", "central-finite-difference"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")
        if self.optimizer not in ("gd-halving", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class PgdConfig:
    init_radius: float = 0.1
    pert_radius: float = 1.0
    steps: int = 200
    step_size: float = 0.05
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.init_radius <= 0 or self.pert_radius <= 0:
            raise ValueError("projection radii must be positive")


@dataclass
class BoundReport:
    """Measured versus guaranteed time-averaged reconstruction error."""

    horizons: np.ndarray
    measured: np.ndarray
    theoretical: np.ndarray
    constants: dict = field(default_factory=dict)

    def max_violation(self) -> float:
        return float(np.max(self.measured - self.theoretical))


@dataclass
class PgdResult:
    u: np.ndarray
    delta_u: np.ndarray
    b: np.ndarray
    achieved: float
    report: BoundReport


# ---------------------------------------------------------------------------
# trainable models


class TrainableSandwich:
    """Alternating static orthogonal layers and certified blocks, trainable.

    Parameters are the free Cayley blocks and biases of the static layers
    plus one flat vector per certified block.
    """

    def __init__(self, m: int, hypers: list[BiLipHyper], seed: int = 0,
                 init_scale: float = 0.3, mu: float | None = None,
                 nu: float | None = None, allocation: dict | None = None):
        self.m = m
        self.hypers = list(hypers)
        self.mu = mu if mu is not None else math.prod(h.mu for h in hypers)
        self.nu = nu if nu is not None else math.prod(h.nu for h in hypers)
        self.allocation = allocation or {}
        rng = np.random.default_rng(seed)
        self.static_params = []
        self.block_thetas = []
        for _ in range(len(hypers) + 1):
            J = torch.tensor(rng.normal(0.0, init_scale, (m, m)), requires_grad=True)
            qb = torch.tensor(np.zeros(m), requires_grad=True)
            self.static_params.append((J, qb))
        for h in hypers:
            size = autodiff.theta_size(h.dims.n, h.dims.q, h.dims.m)
            theta = torch.tensor(rng.normal(0.0, init_scale, size), requires_grad=True)
            self.block_thetas.append(theta)

    @classmethod
    def create(cls, m: int, blocks: int, mu: float, nu: float, n: int, q: int,
               alpha_bar: float = 0.9, activation: str = "relu", eps: float = 1e-6,
               seed: int = 0, init_scale: float = 0.3) -> "TrainableSandwich":
        """Geometric allocation of a composite gain interval over the blocks."""
        per_layer = allocate_bounds(mu, nu, blocks)
        hypers = [
            BiLipHyper(mu=a, nu=b, dims=RenDims(n, q, m), alpha_bar=alpha_bar,
                       eps=eps, activation=activation)
            for a, b in per_layer
        ]
        allocation = {"composite": [mu, nu], "per_block": per_layer, "rule": "geometric"}
        return cls(m, hypers, seed=seed, init_scale=init_scale, mu=mu, nu=nu,
                   allocation=allocation)

    def parameters(self) -> list[torch.Tensor]:
        out = []
        for J, qb in self.static_params:
            out.extend([J, qb])
        out.extend(self.block_thetas)
        return out

    def forward(self, U: torch.Tensor) -> torch.Tensor:
        """Batched forward pass, zero initial states; U is [B, T, m]."""
        seq = U
        for i, h in enumerate(self.hypers):
            J, qb = self.static_params[i]
            seq = autodiff.static_forward_t(autodiff.cayley_t(J), qb, seq)
            W = autodiff.build_ren_weights(
                self.block_thetas[i], h.dims.n, h.dims.q, h.dims.m,
                h.mu, h.nu, h.alpha_bar, h.eps,
            )
            x0 = torch.zeros((U.shape[0], h.dims.n), dtype=autodiff.DTYPE)
            seq, _ = autodiff.ren_forward_t(W, x0, seq, h.activation, acyclic=True)
        J, qb = self.static_params[-1]
        return autodiff.static_forward_t(autodiff.cayley_t(J), qb, seq)

    def export(self) -> SandwichModel:
        from .orthogonal import make_static
        layers = []
        with torch.no_grad():
            for i, h in enumerate(self.hypers):
                J, qb = self.static_params[i]
                layers.append(make_static(J.numpy(), qb.numpy()))
                layers.append(export_block(self.block_thetas[i].numpy(), h))
            J, qb = self.static_params[-1]
            layers.append(make_static(J.numpy(), qb.numpy()))
        return SandwichModel(layers=layers, mu=self.mu, nu=self.nu,
                             allocation=dict(self.allocation))


class TrainableFactor:
    """Energy-preserving inner layer composed after a trainable outer stack."""

    def __init__(self, outer: TrainableSandwich, p: int, seed: int = 0,
                 init_scale: float = 0.3):
        self.outer = outer
        self.p = p
        m = outer.m
        rng = np.random.default_rng(seed + 90001)
        self.inner_J = torch.tensor(rng.normal(0.0, init_scale, (p + m, p + m)),
                                    requires_grad=True)
        self.inner_d = torch.tensor(np.zeros(p), requires_grad=True)
        self.inner_w = torch.tensor(np.zeros(m), requires_grad=True)

    def parameters(self) -> list[torch.Tensor]:
        return self.outer.parameters() + [self.inner_J, self.inner_d, self.inner_w]

    def forward(self, U: torch.Tensor) -> torch.Tensor:
        mid = self.outer.forward(U)
        p, m = self.p, self.outer.m
        Q = autodiff.cayley_t(self.inner_J)
        h0 = torch.zeros((U.shape[0], p), dtype=autodiff.DTYPE)
        y, _ = autodiff.dyn_forward_t(Q[:p, :p], Q[:p, p:], Q[p:, :p], Q[p:, p:],
                                      self.inner_d, self.inner_w, h0, mid)
        return y

    def export(self) -> FactorModel:
        from .orthogonal import make_dyn
        with torch.no_grad():
            inner = make_dyn(self.inner_J.numpy(), self.inner_d.numpy(),
                             self.inner_w.numpy(), self.p, self.outer.m)
        return FactorModel(inner=inner, outer=self.outer.export())


class TrainableFreeRen:
    """Unconstrained acyclic REN baseline: raw weights, no certificate."""

    def __init__(self, dims: RenDims, activation: str = "relu", seed: int = 0,
                 init_scale: float = 0.3):
        self.dims = dims
        self.activation = activation
        n, q, m = dims.n, dims.q, dims.m
        rng = np.random.default_rng(seed)
        scale = init_scale / math.sqrt(max(n + q + m, 1))
        def par(*shape):
            return torch.tensor(rng.normal(0.0, scale, shape), requires_grad=True)
        self.raw = {
            "A": par(n, n), "B1": par(n, q), "B2": par(n, m),
            "C1": par(q, n), "D11": par(q, q), "D12": par(q, m),
            "C2": par(m, n), "D21": par(m, q), "D22": par(m, m),
            "bx": par(n), "bv": par(q), "by": par(m),
        }

    def parameters(self) -> list[torch.Tensor]:
        return list(self.raw.values())

    def _weights_t(self) -> dict:
        W = dict(self.raw)
        W["D11"] = torch.tril(self.raw["D11"], diagonal=-1)
        return W

    def forward(self, U: torch.Tensor) -> torch.Tensor:
        x0 = torch.zeros((U.shape[0], self.dims.n), dtype=autodiff.DTYPE)
        y, _ = autodiff.ren_forward_t(self._weights_t(), x0, U, self.activation,
                                      acyclic=True)
        return y

    def export(self) -> RenWeights:
        with torch.no_grad():
            W = {k: v.numpy().copy() for k, v in self._weights_t().items()}
        return RenWeights(**W, activation=self.activation, acyclic=True)


def export_block(theta: np.ndarray, hyper: BiLipHyper) -> RenBlock:
    """Certified block from a flat vector, with a fresh verified certificate."""
    from .bilip import direct_parameterize
    wts, cert = direct_parameterize(theta, hyper)
    return RenBlock(weights=wts, hyper=hyper, certificate=cert)


# ---------------------------------------------------------------------------
# losses and metrics


def _batches_of(data) -> list:
    if isinstance(data, Dataset):
        return data.batches
    if isinstance(data, tuple) and len(data) == 2 and not isinstance(data[0], tuple):
        return [data]
    return list(data)


def l2_loss(model, batch) -> float:
    """Sum of squared output errors over the batch."""
    total = 0.0
    for u, y in _batches_of(batch):
        pred = simulate(model, np.atleast_2d(np.asarray(u, dtype=float)))
        err = pred - np.atleast_2d(np.asarray(y, dtype=float))
        if err.shape != pred.shape and err.size != pred.size:
            raise ValueError("prediction and target shapes differ")
        total += float(np.sum(err ** 2))
    return total


def nse(model, batch) -> float:
    """Normalized simulation error, averaged over batches."""
    ratios = []
    for u, y in _batches_of(batch):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        denom = float(np.linalg.norm(y))
        if denom == 0.0:
            raise ValueError("target sequence has zero norm")
        pred = simulate(model, np.atleast_2d(np.asarray(u, dtype=float)))
        ratios.append(float(np.linalg.norm(pred - y)) / denom)
    return float(np.mean(ratios))


def _stack_batches(batches) -> tuple[torch.Tensor, torch.Tensor]:
    us = [np.atleast_2d(np.asarray(u, dtype=float)) for u, _ in batches]
    ys = [np.atleast_2d(np.asarray(y, dtype=float)) for _, y in batches]
    lengths = {u.shape[0] for u in us}
    if len(lengths) != 1:
        raise ValueError("training requires equal-length batches")
    return to_t(np.stack(us)), to_t(np.stack(ys))


def _loss_t(trainable, U: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    pred = trainable.forward(U)
    return torch.sum((pred - Y) ** 2)


# ---------------------------------------------------------------------------
# gradients


def _flat_grad(params: list[torch.Tensor]) -> np.ndarray:
    pieces = []
    for p in params:
        g = p.grad
        pieces.append(np.zeros(p.numel()) if g is None else g.detach().numpy().reshape(-1).copy())
    return np.concatenate(pieces) if pieces else np.zeros(0)


def _get_flat(params: list[torch.Tensor]) -> np.ndarray:
    return np.concatenate([p.detach().numpy().reshape(-1).copy() for p in params])


def _set_flat(params: list[torch.Tensor], values: np.ndarray) -> None:
    offset = 0
    with torch.no_grad():
        for p in params:
            size = p.numel()
            p.copy_(to_t(values[offset:offset + size]).reshape(p.shape))
            offset += size


def gradient(model, batch, cfg: TrainConfig) -> np.ndarray:
    """Loss gradient over the flat parameter vector of a trainable model.

    Reverse mode differentiates through the certified construction and the
    full sequence rollout; central differences perturb one coordinate at a
    time and exist as the independent cross-check.
    """
    U, Y = _stack_batches(_batches_of(batch))
    params = model.parameters()
    if cfg.gradient_mode == "reverse-mode":
        for p in params:
            if p.grad is not None:
                p.grad = None
        loss = _loss_t(model, U, Y)
        loss.backward()
        g = _flat_grad(params)
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            raise FloatingPointError(f"non-finite gradient at coordinate {bad}")
        return g
    theta = _get_flat(params)
    g = np.zeros_like(theta)
    h = cfg.fd_step
    with torch.no_grad():
        for i in range(theta.size):
            for sign in (+1.0, -1.0):
                theta[i] += sign * h
                _set_flat(params, theta)
                g[i] += sign * float(_loss_t(model, U, Y))
                theta[i] -= sign * h
            g[i] /= 2.0 * h
    _set_flat(params, theta)
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise FloatingPointError(f"non-finite gradient at coordinate {bad}")
    return g


# ---------------------------------------------------------------------------
# training loop


def train(model, dataset, cfg: TrainConfig):
    """Fit a trainable model; returns ``(exported model, loss history)``.

    The default optimizer is plain gradient descent whose step size halves
    whenever a step would increase the loss; ``adam`` is available for the
    harder fits.  Every emitted checkpoint is exported and re-verified, and
    a non-finite loss aborts with the history attached.
    """
    batches = _batches_of(dataset)
    if not batches:
        raise ValueError("dataset is empty")
    if cfg.batch_size and 0 < cfg.batch_size < len(batches):
        groups = [batches[i:i + cfg.batch_size]
                  for i in range(0, len(batches), cfg.batch_size)]
    else:
        groups = [batches]
    stacked = [_stack_batches(g) for g in groups]
    params = model.parameters()
    history = []
    checkpoints = []

    def group_loss(idx: int) -> float:
        with torch.no_grad():
            return float(_loss_t(model, *stacked[idx]))

    def check_point(step):
        exported = model.export()
        for block in _model_blocks(exported):
            margin = block.certificate.lmi_min_eig
            if not margin > 0:
                raise CertificateViolation(
                    f"checkpoint at step {step} has margin {margin:.3e}")
        checkpoints.append((step, exported))

    if cfg.optimizer == "adam":
        if cfg.gradient_mode != "reverse-mode":
            raise ValueError("the adam optimizer requires reverse-mode gradients")
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
        for step in range(cfg.steps):
            U, Y = stacked[step % len(stacked)]
            opt.zero_grad()
            loss = _loss_t(model, U, Y)
            if not torch.isfinite(loss):
                raise TrainingDivergence(history)
            loss.backward()
            opt.step()
            history.append((step, float(loss.detach())))
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                check_point(step)
    else:
        lr = cfg.learning_rate
        for step in range(cfg.steps):
            idx = step % len(stacked)
            loss_now = group_loss(idx)
            if not np.isfinite(loss_now):
                raise TrainingDivergence(history)
            theta = _get_flat(params)
            g = gradient(model, groups[idx], cfg)
            # halve the step until the loss on this group stops increasing
            while True:
                _set_flat(params, theta - lr * g)
                loss_new = group_loss(idx)
                if np.isfinite(loss_new) and loss_new <= loss_now:
                    loss_now = loss_new
                    break
                lr *= 0.5
                if lr < 1e-16:
                    _set_flat(params, theta)
                    loss_now = group_loss(idx)
                    break
            history.append((step, loss_now))
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                check_point(step)

    exported = model.export()
    for block in _model_blocks(exported):
        if not block.certificate.lmi_min_eig > 0:
            raise CertificateViolation("final model failed re-verification")
    return exported, history


def _model_blocks(model) -> list[RenBlock]:
    if isinstance(model, SandwichModel):
        return model.ren_blocks
    if isinstance(model, FactorModel):
        return model.outer.ren_blocks
    if isinstance(model, RenBlock):
        return [model]
    return []


# ---------------------------------------------------------------------------
# empirical probes


def empirical_bilip_probe(model, trials: int, horizon: int, seed: int = 0,
                          input_scale: float = 1.0):
    """Extreme incremental gain ratios over random input pairs.

    Both trajectories share the (zero) initial state; degenerate pairs are
    resampled.  Returns ``(ratio_min, ratio_max)``.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    m = _model_width(model)
    rng = np.random.default_rng(seed)
    ratio_min, ratio_max = np.inf, 0.0
    done = 0
    while done < trials:
        u = rng.normal(0.0, input_scale, (horizon, m))
        v = rng.normal(0.0, input_scale, (horizon, m))
        du = np.linalg.norm(u - v)
        if du < 1e-9:
            continue
        dy = simulate(model, u) - simulate(model, v)
        ratio = float(np.linalg.norm(dy) / du)
        ratio_min = min(ratio_min, ratio)
        ratio_max = max(ratio_max, ratio)
        done += 1
    return ratio_min, ratio_max


def _model_width(model) -> int:
    if isinstance(model, (SandwichModel, StaticOrtho, DynOrtho)):
        return model.m
    if isinstance(model, FactorModel):
        return model.outer.m
    if isinstance(model, RenBlock):
        return model.weights.dims.m
    if isinstance(model, RenWeights):
        return model.dims.m
    raise TypeError(f"unsupported model type {type(model).__name__}")


def _state_trajectories(model, x0, u_seq) -> np.ndarray:
    """Concatenated block-state trajectory for the probe."""
    if isinstance(model, (RenBlock, RenWeights)):
        wts = model.weights if isinstance(model, RenBlock) else model
        _, xs = ren_simulate(wts, x0, u_seq)
        return xs
    if isinstance(model, SandwichModel):
        splits = np.cumsum([b.weights.dims.n for b in model.ren_blocks])[:-1]
        x0_list = np.split(np.asarray(x0, dtype=float), splits) if len(model.ren_blocks) else []
        _, trajs = sandwich_forward_states(model, x0_list, u_seq)
        return np.hstack(trajs)
    raise TypeError("contraction probe needs a stateful model")


def contraction_probe(model, a, b, u_seq) -> float:
    """Fitted exponential decay rate of the state difference.

    Runs two copies with the same input from initial states ``a`` and ``b``
    and fits ``log |x^a - x^b|`` against time; returns ``exp(slope)``.
    Raises if the initial states coincide.  Samples past numerical
    underflow are dropped, using whatever prefix remains.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if np.array_equal(a, b):
        raise ValueError("initial states coincide; decay rate is undefined")
    xa = _state_trajectories(model, a, u_seq)
    xb = _state_trajectories(model, b, u_seq)
    delta = np.linalg.norm(xa - xb, axis=1)
    floor = max(delta[0] * 1e-13, 1e-290)
    keep = delta > floor
    keep &= np.cumprod(keep) > 0  # contiguous prefix only
    t = np.flatnonzero(keep)
    if t.size < 2:
        raise ValueError("state difference underflowed immediately")
    slope = np.polyfit(t, np.log(delta[t]), 1)[0]
    return float(np.exp(slope))


# ---------------------------------------------------------------------------
# output-layer gain and reconstruction bounds


def _resolve_block(model) -> RenBlock:
    if isinstance(model, RenBlock):
        return model
    if isinstance(model, SandwichModel):
        blocks = model.ren_blocks
        if len(blocks) == 1:
            return blocks[0]
        raise ValueError(
            "certificate constants are only defined for single-block stacks")
    raise TypeError(f"cannot extract a certified block from {type(model).__name__}")


def _block_output(wts: RenWeights, x, u) -> np.ndarray:
    from .ren import EquilibriumConfig, equilibrium_solve
    act = get_activation(wts.activation)
    bw = wts.C1 @ x + wts.D12 @ u + wts.bv
    mode = "acyclic-exact" if wts.acyclic else "fixed-point"
    w = equilibrium_solve(None, wts.D11, bw, act, EquilibriumConfig(mode=mode, tol=1e-13))
    return wts.C2 @ x + wts.D21 @ w + wts.D22 @ u + wts.by


def output_layer_bilip(model, samples: int = 50, seed: int = 0,
                       inputs=None, fd_step: float = 1e-6,
                       extra_states=None):
    """Extreme singular values of the output Jacobian with respect to the state.

    States are sampled from model trajectories under the given (or random)
    inputs; Jacobians use central differences.  ``extra_states`` adds
    (state, input) pairs from trajectories of interest so the estimate
    covers the region an experiment actually visits.  A result of
    ``(0, 0)`` means the output does not depend on the state.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    block = _resolve_block(model)
    wts = block.weights
    n, m = wts.dims.n, wts.dims.m
    if n == 0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    if inputs is None:
        inputs = [rng.normal(0.0, 1.0, (60, m)) for _ in range(3)]
    pairs = []
    for u_seq in inputs:
        _, xs = ren_simulate(wts, np.zeros(n), u_seq)
        for t in range(u_seq.shape[0]):
            pairs.append((xs[t], u_seq[t]))
    idx = rng.choice(len(pairs), size=min(samples, len(pairs)), replace=False)
    chosen = [pairs[i] for i in idx] + list(extra_states or [])
    g1, g2 = np.inf, 0.0
    for x, u in chosen:
        jac = np.empty((m, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = fd_step
            jac[:, j] = (_block_output(wts, x + e, u) - _block_output(wts, x - e, u)) / (2 * fd_step)
        lo, hi = sv_extremes(jac)
        g1, g2 = min(g1, lo), max(g2, hi)
    return float(g1), float(g2)


def _as_sandwich(model) -> SandwichModel:
    from .compose import wrap_block
    if isinstance(model, SandwichModel):
        return model
    if isinstance(model, RenBlock):
        return wrap_block(model)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def bound_constants(model, gamma2: float | None = None, probe_seed: int = 0) -> dict:
    """Certificate-derived constants of the input-reconstruction guarantee."""
    block = _resolve_block(model)
    cert = block.certificate
    if gamma2 is None:
        _, gamma2 = output_layer_bilip(block, samples=50, seed=probe_seed)
    return {
        "kappa1": cert.kappa,
        "alpha1": cert.alpha_bar,
        "gamma2": float(gamma2),
        "mu": block.hyper.mu,
        "nu": block.hyper.nu,
        "overshoot_convention": "sqrt_cond_P",
    }


def theoretical_curve(constants: dict, horizons: np.ndarray, dist_ab: float,
                      delta_cumnorm: np.ndarray) -> np.ndarray:
    """Guaranteed time-averaged error: the initial-state term decays as 1/T
    while the perturbation term tracks the running perturbation energy."""
    kappa, alpha = constants["kappa1"], constants["alpha1"]
    mu, nu, gamma2 = constants["mu"], constants["nu"], constants["gamma2"]
    const = kappa * gamma2 / (mu * math.sqrt(1.0 - alpha ** 2))
    return (const * dist_ab + (nu / mu) * delta_cumnorm) / horizons


def _bound_probe_states(sandwich: SandwichModel, u, delta_u, a, b, fwd_trajs) -> list:
    """(state, input) pairs along the forward runs the guarantee compares."""
    block = _resolve_block(sandwich)
    wts = block.weights
    first = sandwich.layers[0]
    from .orthogonal import static_forward
    pairs = []
    stride = max(1, u.shape[0] // 60)
    for x0, useq in ((a, u), (b, u), (a, u + delta_u)):
        block_in = static_forward(first, useq)
        _, xs = ren_simulate(wts, x0, block_in)
        pairs.extend((xs[t], block_in[t]) for t in range(0, useq.shape[0], stride))
    return pairs


def reconstruction_error_curve(model, u, delta_u, a, b,
                               gamma2: float | None = None) -> BoundReport:
    """Measured and guaranteed time-averaged input-reconstruction error.

    Simulates the model from state ``a`` under the perturbed input, inverts
    from state ``b``, and compares the running error to the certificate
    bound at every horizon.
    """
    sandwich = _as_sandwich(model)
    block = _resolve_block(sandwich)
    u = np.atleast_2d(np.asarray(u, dtype=float))
    delta_u = np.atleast_2d(np.asarray(delta_u, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    y_tilde, trajs = sandwich_forward_states(sandwich, [a], u + delta_u)
    u_hat = sandwich_inverse(sandwich, [b], y_tilde)
    err = u_hat - u
    T = u.shape[0]
    horizons = np.arange(1, T + 1, dtype=float)
    measured = np.sqrt(np.cumsum(np.sum(err ** 2, axis=1))) / horizons
    delta_cum = np.sqrt(np.cumsum(np.sum(delta_u ** 2, axis=1)))
    if gamma2 is None:
        # cover the states this experiment actually visits, not just random
        # rollouts: the output-gain estimate must dominate along these paths
        extra = _bound_probe_states(sandwich, u, delta_u, a, b, trajs)
        _, gamma2 = output_layer_bilip(block, samples=50, seed=0, extra_states=extra)
    constants = bound_constants(block, gamma2=gamma2)
    constants["dist_ab"] = float(np.linalg.norm(a - b))
    constants["delta_norm"] = float(delta_cum[-1])
    theoretical = theoretical_curve(constants, horizons, constants["dist_ab"], delta_cum)
    return BoundReport(horizons=horizons, measured=measured,
                       theoretical=theoretical, constants=constants)


def output_reconstruction_curve(model, y, delta_y, a, b,
                                gamma1: float | None = None) -> BoundReport:
    """Symmetric output-side guarantee, using the inverse block's certificate.

    The inverse shares the forward metric, so its overshoot and rate equal
    the forward ones; the output-layer lower gain enters the constant.
    """
    sandwich = _as_sandwich(model)
    block = _resolve_block(sandwich)
    cert = block.certificate
    if gamma1 is None:
        gamma1, _ = output_layer_bilip(block, samples=50, seed=0)
    if gamma1 <= 0:
        raise ValueError("output-side bound needs a positive lower output gain")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    delta_y = np.atleast_2d(np.asarray(delta_y, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    u_hat = sandwich_inverse(sandwich, [b], y + delta_y)
    y_back = sandwich_forward_states(sandwich, [a], u_hat)[0]
    err = y_back - y
    T = y.shape[0]
    horizons = np.arange(1, T + 1, dtype=float)
    measured = np.sqrt(np.cumsum(np.sum(err ** 2, axis=1))) / horizons
    delta_cum = np.sqrt(np.cumsum(np.sum(delta_y ** 2, axis=1)))
    mu, nu = block.hyper.mu, block.hyper.nu
    const = cert.kappa * nu / (gamma1 * math.sqrt(1.0 - cert.alpha_bar ** 2))
    dist = float(np.linalg.norm(a - b))
    theoretical = (const * dist + (nu / mu) * delta_cum) / horizons
    constants = {"kappa2": cert.kappa, "alpha2": cert.alpha_bar,
                 "gamma1": float(gamma1), "mu": mu, "nu": nu,
                 "dist_ab": dist, "overshoot_convention": "sqrt_cond_P"}
    return BoundReport(horizons=horizons, measured=measured,
                       theoretical=theoretical, constants=constants)


# ---------------------------------------------------------------------------
# projected gradient ascent on the reconstruction error


def project_ball(x: np.ndarray, radius: float, center=None) -> np.ndarray:
    """Euclidean projection onto the ball of given radius about ``center``."""
    x = np.asarray(x, dtype=float)
    c = np.zeros_like(x) if center is None else np.asarray(center, dtype=float)
    offset = x - c
    norm = float(np.linalg.norm(offset))
    if norm <= radius:
        return x.copy()
    return c + offset * (radius / norm)


def _torch_stack_layers(model: SandwichModel):
    layers = []
    for layer in model.layers:
        if isinstance(layer, StaticOrtho):
            layers.append(("static", to_t(layer.Pk), to_t(layer.qk)))
        else:
            W = {k: to_t(getattr(layer.weights, k)) for k in
                 ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22",
                  "bx", "bv", "by")}
            hat_np = invert_ren(layer.weights)
            What = {k: to_t(getattr(hat_np, k)) for k in
                    ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22",
                     "bx", "bv", "by")}
            layers.append(("ren", W, What, layer.weights.activation,
                           hat_np.acyclic, layer.weights.dims.n))
    return layers


def _sandwich_forward_torch(layers, x0s, U):
    seq = U
    i = 0
    for layer in layers:
        if layer[0] == "static":
            seq = autodiff.static_forward_t(layer[1], layer[2], seq)
        else:
            seq, _ = autodiff.ren_forward_t(layer[1], x0s[i], seq, layer[3], acyclic=True)
            i += 1
    return seq


def _sandwich_inverse_torch(layers, x0s, Y):
    seq = Y
    i = sum(1 for l in layers if l[0] == "ren")
    for layer in reversed(layers):
        if layer[0] == "static":
            seq = autodiff.static_inverse_t(layer[1], layer[2], seq)
        else:
            i -= 1
            seq, _ = autodiff.ren_forward_t(layer[2], x0s[i], seq, layer[3],
                                            acyclic=layer[4])
    return seq


def pgd_worst_case(model, cfg: PgdConfig, u_nominal, a=None,
                   gamma2: float | None = None) -> PgdResult:
    """Gradient-ascent search for the worst reconstruction error.

    Optimizes the nominal input, the input perturbation and the inverse's
    initial state, projecting the perturbation and the initial-state
    mismatch onto their balls after every step.  The objective is the worst
    signed margin between measured and guaranteed error over all horizons.
    Returns the best point found with its verified bound report.
    """
    sandwich = _as_sandwich(model)
    block = _resolve_block(sandwich)
    n = block.weights.dims.n
    u_nominal = np.atleast_2d(np.asarray(u_nominal, dtype=float))
    T, m = u_nominal.shape
    a = np.zeros(n) if a is None else np.atleast_1d(np.asarray(a, dtype=float))
    constants = bound_constants(block, gamma2=gamma2)
    const = (constants["kappa1"] * constants["gamma2"]
             / (constants["mu"] * math.sqrt(1.0 - constants["alpha1"] ** 2)))
    ratio = constants["nu"] / constants["mu"]

    layers = _torch_stack_layers(sandwich)
    a_t = to_t(a)
    horizons = to_t(np.arange(1, T + 1, dtype=float))
    rng = np.random.default_rng(cfg.seed)

    def objective(u_t, du_t, b_t):
        y_tilde = _sandwich_forward_torch(layers, [a_t.unsqueeze(0)],
                                          (u_t + du_t).unsqueeze(0))
        u_hat = _sandwich_inverse_torch(layers, [b_t.unsqueeze(0)], y_tilde)[0]
        err2 = torch.cumsum(torch.sum((u_hat - u_t) ** 2, dim=1), dim=0)
        measured = torch.sqrt(err2 + 1e-300) / horizons
        delta_cum = torch.sqrt(torch.cumsum(torch.sum(du_t ** 2, dim=1), dim=0) + 1e-300)
        dist = torch.linalg.norm(b_t - a_t)
        theory = (const * dist + ratio * delta_cum) / horizons
        return torch.max(measured - theory)

    best = None
    for restart in range(max(1, cfg.restarts)):
        du0 = rng.normal(0.0, 1.0, (T, m))
        du0 = project_ball(du0, cfg.pert_radius)
        b0 = project_ball(a + rng.normal(0.0, cfg.init_radius, n), cfg.init_radius, a) \
            if n else np.zeros(0)
        u_t = to_t(u_nominal.copy()).requires_grad_(True)
        du_t = to_t(du0).requires_grad_(True)
        b_t = to_t(b0).requires_grad_(True)
        for _ in range(cfg.steps):
            for p in (u_t, du_t, b_t):
                if p.grad is not None:
                    p.grad = None
            obj = objective(u_t, du_t, b_t)
            if not torch.isfinite(obj):
                raise FloatingPointError("worst-case objective became non-finite")
            obj.backward()
            with torch.no_grad():
                for p in (u_t, du_t, b_t):
                    if p.grad is not None and p.numel():
                        p += cfg.step_size * p.grad / (p.grad.norm() + 1e-12)
                du_t.copy_(to_t(project_ball(du_t.numpy(), cfg.pert_radius)))
                if n:
                    b_t.copy_(to_t(project_ball(b_t.numpy(), cfg.init_radius, a)))
        with torch.no_grad():
            final = float(objective(u_t, du_t, b_t))
        candidate = (final, u_t.detach().numpy().copy(),
                     du_t.detach().numpy().copy(), b_t.detach().numpy().copy())
        if best is None or candidate[0] > best[0]:
            best = candidate

    _, u_best, du_best, b_best = best
    # the final verdict re-estimates the output gain along the worst-case
    # trajectories; extra samples can only raise it, loosening the bound
    extra = _bound_probe_states(sandwich, u_best, du_best, a, b_best, None)
    _, gamma2_wc = output_layer_bilip(block, samples=50, seed=0, extra_states=extra)
    report = reconstruction_error_curve(sandwich, u_best, du_best, a, b_best,
                                        gamma2=max(constants["gamma2"], gamma2_wc))
    achieved = float(np.max(report.measured))
    return PgdResult(u=u_best, delta_u=du_best, b=b_best, achieved=achieved,
                     report=report)
