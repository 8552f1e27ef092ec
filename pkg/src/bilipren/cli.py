"""Batch command-line surface: data generation, training, verification,
robust inversion and inner-outer factorization.

Every command takes a JSON config (a path, or the name of a shipped
preset), supports ``--out-dir`` and ``--seed`` overrides, writes a
manifest next to its outputs, and is deterministic given (config, seed).

Exit codes: 0 success, 2 config error, 3 certificate failure,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .compose import FactorModel, RenBlock, SandwichModel, simulate
from .learning import (PgdConfig, TrainConfig, TrainableFactor,
                       TrainableSandwich, TrainingDivergence,
                       empirical_bilip_probe, nse, pgd_worst_case,
                       reconstruction_error_curve, train)
from .orthogonal import dyn_forward
from .plants import (Dataset, DelayPlantConfig, MsdConfig, SignalConfig,
                     SimulationError, load_dataset, make_delay_dataset,
                     make_msd_dataset, save_dataset)
from .serialize import ModelFormatError, load_model, save_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CERTIFICATE = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


def resolve_config(name_or_path: str) -> dict:
    """Load a JSON config from a path or from the shipped presets."""
    path = Path(name_or_path)
    if path.exists():
        text = path.read_text()
    else:
        candidate = resources.files("bilipren").joinpath(f"presets/{name_or_path}.json")
        if not candidate.is_file():
            raise ConfigError(f"no config file or preset named {name_or_path!r}")
        text = candidate.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _require(cfg: dict, key: str, types, where: str):
    if key not in cfg:
        raise ConfigError(f"missing key {key!r} in {where}")
    value = cfg[key]
    if not isinstance(value, types):
        raise ConfigError(f"key {key!r} in {where} has wrong type")
    return value


def _config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: dict, seed, outputs):
    import torch
    manifest = {
        "command": command,
        "config_hash": _config_hash(cfg),
        "config": cfg,
        "seed": seed,
        "versions": {"bilipren": __version__, "numpy": np.__version__,
                     "torch": torch.__version__},
        "outputs": sorted(str(o) for o in outputs),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format(float(v), ".17g") for v in row])


# ---------------------------------------------------------------------------
# dataset generation


def _generate_dataset(cfg: dict, seed: int) -> Dataset:
    kind = _require(cfg, "kind", str, "gen-data config")
    if kind == "msd":
        plant = MsdConfig(**cfg.get("plant", {}))
        sig = cfg.get("signal", {})
        signal = SignalConfig(tau=sig.get("tau", 20.0), sigma=sig.get("sigma", 3.0),
                              seed=seed)
        return make_msd_dataset(plant, signal, n_batches=cfg.get("n_batches", 10),
                                snr_db=cfg.get("snr_db", 30.0), seed=seed)
    if kind == "delay":
        plant = DelayPlantConfig(**cfg.get("plant", {}))
        return make_delay_dataset(plant, n_batches=cfg.get("n_batches", 100),
                                  input_std=cfg.get("input_std", 1.0), seed=seed,
                                  snr_db=cfg.get("snr_db"))
    raise ConfigError(f"unknown dataset kind {kind!r}")


def cmd_gen_data(cfg: dict, out_dir: Path, seed: int) -> int:
    try:
        dataset = _generate_dataset(cfg, seed)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad plant/signal settings: {exc}") from exc
    paths = save_dataset(dataset, out_dir)
    _write_manifest(out_dir, "gen-data", cfg, seed, paths)
    print(f"wrote {len(paths)} batches to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training


def _load_or_generate_data(cfg: dict, seed: int) -> Dataset:
    if "data" in cfg:
        data_dir = Path(cfg["data"])
        if not (data_dir / "dataset.json").exists():
            raise ConfigError(f"no dataset found under {data_dir}")
        return load_dataset(data_dir)
    if "gen" in cfg:
        return _generate_dataset(cfg["gen"], seed)
    raise ConfigError("config needs either 'data' (a directory) or 'gen' (inline)")


def _split_holdout(dataset: Dataset, holdout: int):
    if holdout <= 0:
        return dataset.batches, []
    if holdout >= len(dataset.batches):
        raise ConfigError("holdout leaves no training batches")
    return dataset.batches[:-holdout], dataset.batches[-holdout:]


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    t.setdefault("seed", seed)
    try:
        return TrainConfig(**t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train settings: {exc}") from exc


def _build_sandwich(arch: dict, m: int, seed: int) -> TrainableSandwich:
    try:
        return TrainableSandwich.create(
            m=m,
            blocks=arch.get("blocks", 1),
            mu=_require(arch, "mu", (int, float), "arch"),
            nu=_require(arch, "nu", (int, float), "arch"),
            n=_require(arch, "n", int, "arch"),
            q=_require(arch, "q", int, "arch"),
            alpha_bar=arch.get("alpha_bar", 0.9),
            activation=arch.get("activation", "relu"),
            seed=seed,
            init_scale=arch.get("init_scale", 0.3),
        )
    except ValueError as exc:
        raise ConfigError(f"bad arch settings: {exc}") from exc


def cmd_train(cfg: dict, out_dir: Path, seed: int) -> int:
    dataset = _load_or_generate_data(cfg, seed)
    train_batches, test_batches = _split_holdout(dataset, cfg.get("holdout", 0))
    arch = _require(cfg, "arch", dict, "train config")
    m = train_batches[0][0].shape[1]
    trainable = _build_sandwich(arch, m, seed)
    tcfg = _train_config(cfg, seed)
    try:
        model, history = train(trainable, train_batches, tcfg)
    except TrainingDivergence:
        print("training diverged", file=sys.stderr)
        return EXIT_NUMERICAL
    model_path = out_dir / "model.json"
    save_model(model, model_path)
    hist_path = out_dir / "history.csv"
    _write_csv(hist_path, ["step", "loss"], history)
    summary = {"train_nse": nse(model, train_batches)}
    if test_batches:
        summary["test_nse"] = nse(model, test_batches)
    for block in model.ren_blocks:
        if not block.certificate.lmi_min_eig > 0:
            print("trained model failed certification", file=sys.stderr)
            return EXIT_CERTIFICATE
    summary["lmi_min_eig"] = min(b.certificate.lmi_min_eig for b in model.ren_blocks)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    _write_manifest(out_dir, "train", cfg, seed,
                    [model_path, hist_path, out_dir / "summary.json"])
    print(f"trained model -> {model_path}  (train NSE {summary['train_nse']:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verification


def cmd_verify(model_file: str, out_dir: Path | None, seed: int) -> int:
    from .bilip import verify_lmi
    try:
        model = load_model(model_file)
    except ModelFormatError as exc:
        print(f"cannot load model: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    blocks = []
    if isinstance(model, SandwichModel):
        blocks = model.ren_blocks
    elif isinstance(model, FactorModel):
        blocks = model.outer.ren_blocks
    elif isinstance(model, RenBlock):
        blocks = [model]
    ok = True
    for i, block in enumerate(blocks):
        cert = block.certificate
        margin = verify_lmi(block.weights, cert.P, cert.Lambda, cert.mu, cert.nu,
                            cert.alpha_bar)
        status = "pass" if margin > 0 else "FAIL"
        ok &= margin > 0
        print(f"block {i}: lmi_min_eig={margin:.6e} kappa={cert.kappa:.4f} "
              f"alpha_bar={cert.alpha_bar} interval=({cert.mu}, {cert.nu}) [{status}]")
    probe_target = model if not isinstance(model, FactorModel) else model.outer
    lo, hi = empirical_bilip_probe(probe_target, trials=20, horizon=40, seed=seed)
    print(f"empirical gain ratios: [{lo:.6f}, {hi:.6f}]")
    if isinstance(probe_target, (SandwichModel, RenBlock)):
        mu = probe_target.mu if isinstance(probe_target, SandwichModel) else probe_target.hyper.mu
        nu = probe_target.nu if isinstance(probe_target, SandwichModel) else probe_target.hyper.nu
        tol = 1e-6
        if lo < mu * (1 - tol) or hi > nu * (1 + tol):
            print("empirical probe escaped the certified interval", file=sys.stderr)
            ok = False
    print("certified" if ok else "NOT certified")
    if out_dir is not None:
        _write_manifest(out_dir, "verify", {"model": str(model_file)}, seed, [])
    return EXIT_OK if ok else EXIT_CERTIFICATE


# ---------------------------------------------------------------------------
# robust inversion report


def cmd_invert(cfg: dict, model_file: str, data_dir: str, out_dir: Path,
               seed: int) -> int:
    try:
        model = load_model(model_file)
    except ModelFormatError as exc:
        print(f"cannot load model: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    blocks = model.ren_blocks if isinstance(model, SandwichModel) else (
        [model] if isinstance(model, RenBlock) else None)
    if not blocks:
        print("robust inversion needs a certified stack", file=sys.stderr)
        return EXIT_CONFIG
    for block in blocks:
        if not block.certificate.lmi_min_eig > 0:
            print("model is not certified", file=sys.stderr)
            return EXIT_CERTIFICATE
    data_path = Path(data_dir)
    if not (data_path / "dataset.json").exists():
        print(f"no dataset under {data_path}", file=sys.stderr)
        return EXIT_CONFIG
    dataset = load_dataset(data_path)
    u = dataset.batches[0][0]
    rng = np.random.default_rng(seed)
    dist_ab = cfg.get("dist_ab", 0.1)
    pert_norm = cfg.get("pert_norm", 1.0)
    n = blocks[0].weights.dims.n
    a = np.zeros(n)
    offset = rng.normal(0.0, 1.0, n)
    b = a + offset / max(np.linalg.norm(offset), 1e-12) * dist_ab
    delta = rng.normal(0.0, 1.0, u.shape)
    delta = delta / max(np.linalg.norm(delta), 1e-12) * pert_norm

    try:
        report = reconstruction_error_curve(model, u, delta, a, b)
        pgd_cfg = PgdConfig(init_radius=dist_ab, pert_radius=pert_norm,
                            seed=seed, **cfg.get("pgd", {}))
        pgd = pgd_worst_case(model, pgd_cfg, u, a=a,
                             gamma2=report.constants["gamma2"])
    except (FloatingPointError, SimulationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    curve_path = out_dir / "bound_curve.csv"
    _write_csv(curve_path, ["T", "measured", "theoretical"],
               zip(report.horizons, report.measured, report.theoretical))
    pgd_curve_path = out_dir / "pgd_bound_curve.csv"
    _write_csv(pgd_curve_path, ["T", "measured", "theoretical"],
               zip(pgd.report.horizons, pgd.report.measured, pgd.report.theoretical))
    recon_path = out_dir / "reconstruction.csv"
    sandwich = model if isinstance(model, SandwichModel) else None
    from .learning import _as_sandwich
    from .compose import sandwich_forward_states, sandwich_inverse
    sw = _as_sandwich(model)
    y_tilde = sandwich_forward_states(sw, [a], u + delta)[0]
    u_hat = sandwich_inverse(sw, [b], y_tilde)
    m = u.shape[1]
    header = (["t"] + [f"u_{j+1}" for j in range(m)]
              + [f"u_hat_{j+1}" for j in range(m)])
    _write_csv(recon_path, header,
               ([t / dataset.sample_rate, *u[t], *u_hat[t]] for t in range(len(u))))
    summary = {
        "constants": report.constants,
        "max_violation": report.max_violation(),
        "pgd_max_violation": pgd.report.max_violation(),
        "pgd_achieved": pgd.achieved,
        "bound_holds": bool(report.max_violation() <= 0
                            and pgd.report.max_violation() <= 0),
    }
    with open(out_dir / "pgd_report.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    _write_manifest(out_dir, "invert", cfg, seed,
                    [curve_path, pgd_curve_path, recon_path, out_dir / "pgd_report.json"])
    print(f"bound holds: {summary['bound_holds']}  "
          f"(worst margin {max(summary['max_violation'], summary['pgd_max_violation']):.3e})")
    return EXIT_OK if summary["bound_holds"] else EXIT_CERTIFICATE


# ---------------------------------------------------------------------------
# factorization experiment


def cmd_factorize(cfg: dict, out_dir: Path, seed: int) -> int:
    dataset = _load_or_generate_data(cfg, seed)
    train_batches, test_batches = _split_holdout(dataset, cfg.get("holdout", 0))
    arch = _require(cfg, "arch", dict, "factorize config")
    outer_arch = _require(arch, "outer", dict, "factorize arch")
    inner_p = _require(arch, "inner_p", int, "factorize arch")
    m = train_batches[0][0].shape[1]
    outer = _build_sandwich(outer_arch, m, seed)
    trainable = TrainableFactor(outer, p=inner_p, seed=seed,
                                init_scale=arch.get("inner_init_scale", 0.3))
    tcfg = _train_config(cfg, seed)
    try:
        model, history = train(trainable, train_batches, tcfg)
    except TrainingDivergence:
        print("training diverged", file=sys.stderr)
        return EXIT_NUMERICAL

    model_path = out_dir / "model.json"
    save_model(model, model_path)
    _write_csv(out_dir / "history.csv", ["step", "loss"], history)

    probe = test_batches[0] if test_batches else train_batches[0]
    u_probe = probe[0]
    composed = simulate(model, u_probe)
    outer_resp = simulate(model.outer, u_probe)
    _write_csv(out_dir / "composed_response.csv",
               ["t", "y_plant", "y_composed", "y_outer"],
               ([t, probe[1][t, 0], composed[t, 0], outer_resp[t, 0]]
                for t in range(len(u_probe))))
    # impulse response of the inner layer per channel, zero initial state;
    # deviation from the zero-input response, so biases cancel and the
    # energy identity applies
    horizon = cfg.get("impulse_horizon", 4000)
    zero_resp, _ = dyn_forward(model.inner, None, np.zeros((horizon, m)))
    energies = []
    rows = None
    for ch in range(m):
        e = np.zeros((horizon, m))
        e[0, ch] = 1.0
        resp, _ = dyn_forward(model.inner, None, e)
        resp = resp - zero_resp
        energies.append(float(np.sum(resp ** 2)))
        rows = resp if rows is None else np.hstack([rows, resp])
    _write_csv(out_dir / "inner_impulse.csv",
               ["t"] + [f"h_{i+1}" for i in range(rows.shape[1])],
               ([t, *rows[t]] for t in range(min(horizon, 200))))
    lag = int(np.argmax(np.correlate(composed[:, 0] - composed[:, 0].mean(),
                                     outer_resp[:, 0] - outer_resp[:, 0].mean(),
                                     mode="full")) - (len(u_probe) - 1))
    summary = {
        "train_nse": nse(model, train_batches),
        "inner_impulse_energy": energies,
        "outer_to_composed_lag": lag,
    }
    if test_batches:
        summary["test_nse"] = nse(model, test_batches)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    _write_manifest(out_dir, "factorize", cfg, seed,
                    [model_path, out_dir / "summary.json"])
    print(f"factor model -> {model_path}  (lag {lag} steps, "
          f"impulse energy {energies})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilipren",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True,
                           help="JSON config path or preset name")
        p.add_argument("--out-dir", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    add_common(sub.add_parser("gen-data", help="generate benchmark datasets"))
    add_common(sub.add_parser("train", help="fit a certified stack"))
    p_verify = sub.add_parser("verify", help="re-check a model's certificates")
    p_verify.add_argument("model", help="model JSON file")
    add_common(p_verify, needs_config=False)
    p_invert = sub.add_parser("invert", help="reconstruction error versus bound")
    p_invert.add_argument("model", help="model JSON file")
    p_invert.add_argument("dataset", help="dataset directory")
    add_common(p_invert)
    add_common(sub.add_parser("factorize", help="fit an inner-outer factor model"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out_dir)
    try:
        cfg = resolve_config(args.config) if getattr(args, "config", None) else {}
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out_dir, seed)
        if args.command == "train":
            return cmd_train(cfg, out_dir, seed)
        if args.command == "verify":
            return cmd_verify(args.model, out_dir, seed)
        if args.command == "invert":
            return cmd_invert(cfg, args.model, args.dataset, out_dir, seed)
        if args.command == "factorize":
            return cmd_factorize(cfg, out_dir, seed)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
