"""Ground-truth plant simulators and dataset generation.

Two benchmark plants: a scalar system with an input time delay, and a
chain of four carts coupled by nonlinear springs and linear dampers,
driven at the first cart and measured at the last.  Both integrate with
fixed-step fourth-order Runge-Kutta under zero-order-hold inputs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np


class SimulationError(RuntimeError):
    """State became non-finite during integration."""

    def __init__(self, step: int):
        super().__init__(f"state blew up at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class DelayPlantConfig:
    """Scalar plant dx/dt = gain * tanh(x) + u(t - delay), output y = x."""

    gain: float = 0.9
    delay: float = 1.0
    dt: float = 0.1
    duration: float = 10.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        steps = self.delay / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("delay must be an integer multiple of dt")

    @property
    def delay_steps(self) -> int:
        return int(round(self.delay / self.dt))


@dataclass(frozen=True)
class MsdConfig:
    """Chain of carts with piecewise-linear springs and linear dampers."""

    n_carts: int = 4
    masses: tuple = (1.0, 1.0, 1.0, 1.0)
    spring_consts: tuple = (1.0, 1.0, 1.0, 1.0)
    damping_consts: tuple = (0.5, 0.5, 0.5, 0.5)
    dt: float = 0.02
    duration: float = 20.0

    def __post_init__(self):
        for name in ("masses", "spring_consts", "damping_consts"):
            vals = getattr(self, name)
            if len(vals) != self.n_carts:
                raise ValueError(f"{name} must have one entry per cart")
            if any(v <= 0 for v in vals):
                raise ValueError(f"{name} must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class SignalConfig:
    """Piecewise-constant excitation: hold times uniform on [0, tau],
    levels Gaussian with standard deviation sigma."""

    tau: float = 20.0
    sigma: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0 or self.sigma <= 0:
            raise ValueError("tau and sigma must be positive")


@dataclass
class Dataset:
    """Batched input/output sequences plus the provenance to regenerate them."""

    batches: list
    sample_rate: float
    noise_snr_db: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, (u, y) in enumerate(self.batches):
            u = np.atleast_2d(np.asarray(u, dtype=float))
            y = np.atleast_2d(np.asarray(y, dtype=float))
            if u.shape[0] != y.shape[0]:
                raise ValueError(f"batch {i}: input and output lengths differ")
            self.batches[i] = (u, y)


# ---------------------------------------------------------------------------
# spring force profile


def gamma(d):
    """Piecewise-linear spring characteristic.

    Continuous, with slope 0.25 on (-1, 1) and slope 1 outside:
    ``d + 0.75`` for d <= -1, ``0.25 d`` for |d| < 1, ``d - 0.75`` for d >= 1.
    """
    d = np.asarray(d, dtype=float)
    out = np.where(d <= -1.0, d + 0.75, np.where(d >= 1.0, d - 0.75, 0.25 * d))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# integrators


def _rk4_fixed(f, x0: np.ndarray, u_held: np.ndarray, dt: float) -> np.ndarray:
    """Classic RK4 with the input held constant over each step.

    Returns the state trajectory sampled at step boundaries, shape
    (T + 1, len(x0)).
    """
    T = u_held.shape[0]
    xs = np.empty((T + 1, x0.shape[0]))
    xs[0] = x0
    x = x0.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            u = u_held[t]
            k1 = f(x, u)
            k2 = f(x + 0.5 * dt * k1, u)
            k3 = f(x + 0.5 * dt * k2, u)
            k4 = f(x + dt * k3, u)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise SimulationError(t)
            xs[t + 1] = x
    return xs


def msd_simulate(cfg: MsdConfig, u_seq):
    """Drive the first cart, measure the last cart's position.

    ``u_seq`` is the force on cart 1 sampled at 1/dt, shape (T,) or (T, 1).
    Returns ``(y_seq, x_seq)`` where ``y_seq`` has shape (T, 1) and
    ``x_seq`` stacks positions then velocities, shape (T + 1, 2 n_carts).
    """
    u = np.asarray(u_seq, dtype=float).reshape(-1)
    nc = cfg.n_carts
    mass = np.asarray(cfg.masses, dtype=float)
    k = np.asarray(cfg.spring_consts, dtype=float)
    c = np.asarray(cfg.damping_consts, dtype=float)

    def dynamics(x, force):
        pos, vel = x[:nc], x[nc:]
        # extension of spring i: cart i relative to cart i-1 (wall for i = 0)
        ext = np.empty(nc)
        ext[0] = pos[0]
        ext[1:] = pos[1:] - pos[:-1]
        relv = np.empty(nc)
        relv[0] = vel[0]
        relv[1:] = vel[1:] - vel[:-1]
        spring = k * gamma(ext)
        damper = c * relv
        f_net = -spring - damper
        f_net[:-1] += spring[1:] + damper[1:]
        f_net[0] += force
        return np.concatenate([vel, f_net / mass])

    xs = _rk4_fixed(dynamics, np.zeros(2 * nc), u, cfg.dt)
    y = xs[1:, nc - 1:nc]
    return y, xs


def delay_simulate(cfg: DelayPlantConfig, u_seq):
    """Integrate the delayed scalar plant; the output samples the state.

    Input history before t = 0 is taken as zero, so an impulse at t = 0
    first reaches the state at t = delay.
    """
    u = np.asarray(u_seq, dtype=float).reshape(-1)
    ds = cfg.delay_steps
    u_delayed = np.concatenate([np.zeros(ds), u])[: u.shape[0]]

    def dynamics(x, ud):
        return cfg.gain * np.tanh(x) + ud

    xs = _rk4_fixed(dynamics, np.zeros(1), u_delayed, cfg.dt)
    return xs[1:, :1]


# ---------------------------------------------------------------------------
# excitation and noise


def piecewise_input(cfg: SignalConfig, duration: float, dt: float) -> np.ndarray:
    """Piecewise-constant signal, shape (T, 1), deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    T = int(round(duration / dt))
    levels = []
    while len(levels) < T:
        hold = rng.uniform(0.0, cfg.tau)
        n = max(1, int(round(hold / dt)))
        value = rng.normal(0.0, cfg.sigma)
        levels.extend([value] * n)
    return np.asarray(levels[:T], dtype=float).reshape(-1, 1)


def add_noise_snr(y_seq, snr_db, seed: int = 0) -> np.ndarray:
    """Add white Gaussian noise at a prescribed signal-to-noise ratio.

    The noise scale comes from the measured signal power, so the realized
    ratio matches ``snr_db`` up to the sampling error of the noise itself.
    ``snr_db`` of None or +inf returns the signal unchanged.
    """
    y = np.asarray(y_seq, dtype=float)
    if snr_db is None or np.isinf(snr_db):
        return y.copy()
    rms = float(np.sqrt(np.mean(y ** 2)))
    if rms == 0.0:
        raise ValueError("cannot scale noise against an all-zero signal")
    std = rms * 10.0 ** (-snr_db / 20.0)
    rng = np.random.default_rng(seed)
    return y + rng.normal(0.0, std, size=y.shape)


# ---------------------------------------------------------------------------
# dataset files


def _format_float(x: float) -> str:
    return format(float(x), ".17g")


def save_dataset(dataset: Dataset, out_dir) -> list[Path]:
    """Write one CSV per batch plus a JSON sidecar; round-trips bitwise."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (u, y) in enumerate(dataset.batches):
        m_u, m_y = u.shape[1], y.shape[1]
        header = (["t"] + [f"u_{j + 1}" for j in range(m_u)]
                  + [f"y_{j + 1}" for j in range(m_y)])
        path = out_dir / f"batch_{i:03d}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(u.shape[0]):
                row = [t / dataset.sample_rate, *u[t], *y[t]]
                writer.writerow([_format_float(v) for v in row])
        paths.append(path)
    sidecar = {
        "sample_rate": dataset.sample_rate,
        "noise_snr_db": dataset.noise_snr_db,
        "n_batches": len(dataset.batches),
        "provenance": dataset.provenance,
    }
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return paths


def load_dataset(in_dir) -> Dataset:
    in_dir = Path(in_dir)
    with open(in_dir / "dataset.json") as fh:
        sidecar = json.load(fh)
    batches = []
    for i in range(sidecar["n_batches"]):
        with open(in_dir / f"batch_{i:03d}.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            m_u = sum(1 for h in header if h.startswith("u_"))
            rows = [[float(v) for v in row] for row in reader]
        data = np.asarray(rows, dtype=float)
        batches.append((data[:, 1:1 + m_u], data[:, 1 + m_u:]))
    return Dataset(
        batches=batches,
        sample_rate=sidecar["sample_rate"],
        noise_snr_db=sidecar["noise_snr_db"],
        provenance=sidecar["provenance"],
    )


# ---------------------------------------------------------------------------
# experiment-ready generators


def make_msd_dataset(msd: MsdConfig, signal: SignalConfig, n_batches: int,
                     snr_db: float | None = 30.0, seed: int = 0) -> Dataset:
    """Independent excitation/noise draws per batch, all from one seed."""
    batches = []
    for b in range(n_batches):
        sig = SignalConfig(tau=signal.tau, sigma=signal.sigma, seed=seed * 10007 + b)
        u = piecewise_input(sig, msd.duration, msd.dt)
        y, _ = msd_simulate(msd, u)
        y = add_noise_snr(y, snr_db, seed=seed * 20011 + b)
        batches.append((u, y))
    return Dataset(
        batches=batches,
        sample_rate=1.0 / msd.dt,
        noise_snr_db=snr_db,
        provenance={"plant": "msd", "config": asdict(msd),
                    "signal": asdict(signal), "seed": seed,
                    "n_batches": n_batches},
    )


def make_delay_dataset(plant: DelayPlantConfig, n_batches: int,
                       input_std: float = 1.0, seed: int = 0,
                       snr_db: float | None = None) -> Dataset:
    """Gaussian-noise excitation batches for the delayed plant."""
    rng = np.random.default_rng(seed)
    T = int(round(plant.duration / plant.dt))
    batches = []
    for b in range(n_batches):
        u = rng.normal(0.0, input_std, size=(T, 1))
        y = delay_simulate(plant, u)
        if snr_db is not None:
            y = add_noise_snr(y, snr_db, seed=seed * 31013 + b)
        batches.append((u, y))
    return Dataset(
        batches=batches,
        sample_rate=1.0 / plant.dt,
        noise_snr_db=snr_db,
        provenance={"plant": "delay", "config": asdict(plant),
                    "input_std": input_std, "seed": seed,
                    "n_batches": n_batches},
    )
