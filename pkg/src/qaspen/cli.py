"""Command-line front end: ``qaspen {train,propagate,oracle,benchmark-scaling}``.

Runs are described by a sectioned INI file; every command writes the
resolved configuration next to its outputs so a run can be repeated from its
own output directory.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
import time
import tracemalloc
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .liouville import HilbertSystem, build_liouville, free_propagator, pauli, site_chain, spin_boson
from .noise import CorrelationSpec, QuadratureError, SpectralDensity, build_correlation_matrix
from .oracle import BudgetExceeded, CovarianceError, config_hash, path_sum_series, sle_monte_carlo
from .propagator import make_dynamics, markov_linking_set, propagate, write_bond_log
from .stt_kernel import (ChebyshevBasis, LinkingMatrixSet, TrainingConfig, TrainingDivergence,
                         exact_linking_set, train_linking_set, write_curve_csv)
from .ttcore import BondDimensionError, SvdPolicy

logger = logging.getLogger("qaspen")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_RESOURCE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _words(text: str) -> list[str]:
    return [x for x in text.replace(",", " ").split() if x]


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


# section -> key -> (parser, default); None default means "required or unset"
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "system": {
        "model": (str, "spin-boson"),
        "d": (int, 2),
        "omega": (float, 1.0),
        "eps": (float, 0.5),
        "alpha": (float, 0.75),
        "periodic": (_bool, True),
        "h0_file": (str, ""),
        "v_file": (str, ""),
        "initial": (str, "0"),
    },
    "noise": {
        "mode": (str, "intrinsic"),
        "beta": (float, 1.0),
        "cutoff": (float, 1.0),
        "gamma": (float, 1.0),
        "density_file": (str, ""),
    },
    "discretization": {
        "tau": (float, 0.25),
        "steps": (int, 60),
        "memory": (int, 4),
    },
    "stt": {
        "kernel": (str, "trained"),
        "n_basis": (int, 10),
        "bond": (_opt_int, None),
        "eps_svd": (float, 1e-8),
        "max_bond": (_opt_int, None),
        "optimizer": (str, "sweep"),
        "batch": (int, 2048),
        "batch_growth": (float, 1.0),
        "max_batch": (int, 4096),
        "learning_rate": (float, 1.0),
        "decay": (float, 1.0),
        "decay_every": (int, 2000),
        "max_steps": (int, 4000),
        "target_loss": (float, 1e-14),
        "init_noise": (float, 1e-2),
    },
    "output": {
        "directory": (str, "qaspen-out"),
        "observables": (str, ""),
        "seed": (int, 0),
        "renormalize": (_bool, False),
    },
    "oracle": {
        "path_steps": (int, 4),
        "n_traj": (int, 10000),
        "tau_fine": (float, 0.0),
        "t_max": (float, 0.0),
        "mc_memory": (_opt_int, None),
    },
    "benchmark": {
        "dims": (_ints, [2, 4, 8, 16]),
    },
}

# sections whose content fixes the trained kernel
HASHED_SECTIONS = ("system", "noise", "discretization", "stt")


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    raw: dict[str, dict[str, str]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def hash(self) -> str:
        payload = {s: self.raw.get(s, {}) for s in HASHED_SECTIONS}
        return config_hash(payload)

    def with_overrides(self, **sections) -> "RunConfig":
        raw = {s: dict(v) for s, v in self.raw.items()}
        for section, items in sections.items():
            raw.setdefault(section, {}).update({k: str(v) for k, v in items.items()})
        return parse_config_dict(raw)

    def write(self, path: Path) -> None:
        cp = configparser.ConfigParser()
        for section, items in self.raw.items():
            cp[section] = items
        with open(path, "w") as fh:
            cp.write(fh)


def parse_config_dict(raw: dict[str, dict[str, str]]) -> RunConfig:
    values: dict[str, dict[str, Any]] = {}
    resolved: dict[str, dict[str, str]] = {}
    for section in raw:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        unknown = set(given) - set(keys)
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
        values[section] = {}
        resolved[section] = {}
        for key, (parse, default) in keys.items():
            if key in given:
                try:
                    values[section][key] = parse(given[key])
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
                resolved[section][key] = given[key]
            else:
                values[section][key] = default
                resolved[section][key] = _render(default)
    _validate(values)
    return RunConfig(values, resolved)


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, list):
        return " ".join(str(v) for v in value)
    return str(value)


def _validate(v: dict[str, dict[str, Any]]) -> None:
    sysc, noise, disc, stt = v["system"], v["noise"], v["discretization"], v["stt"]
    if sysc["model"] not in ("spin-boson", "chain", "custom"):
        raise ConfigError(f"unknown model {sysc['model']!r}")
    if noise["mode"] not in ("intrinsic", "extrinsic", "markov"):
        raise ConfigError(f"unknown noise mode {noise['mode']!r}")
    if stt["kernel"] not in ("trained", "exact"):
        raise ConfigError("stt.kernel must be 'trained' or 'exact'")
    if stt["optimizer"] not in ("sgd", "adam", "sweep"):
        raise ConfigError("stt.optimizer must be 'sgd', 'adam' or 'sweep'")
    if not 0 < stt["eps_svd"] < 1:
        raise ConfigError("stt.eps_svd must lie in (0, 1)")
    if disc["tau"] <= 0 or disc["steps"] < 1:
        raise ConfigError("tau must be positive and steps at least one")
    if disc["memory"] < 0 or disc["memory"] + 1 > disc["steps"]:
        raise ConfigError("need 0 <= memory < steps")
    if noise["beta"] <= 0 or noise["cutoff"] <= 0 or noise["gamma"] < 0:
        raise ConfigError("beta and cutoff must be positive, gamma non-negative")
    if sysc["model"] == "custom" and not (sysc["h0_file"] and sysc["v_file"]):
        raise ConfigError("custom model needs h0_file and v_file")
    if sysc["model"] == "chain" and sysc["d"] < 2:
        raise ConfigError("chain needs d >= 2")
    for d in v["benchmark"]["dims"]:
        if d < 2 or d & (d - 1) or d > 32:
            raise ConfigError("benchmark dims must be powers of two between 2 and 32")


def load_config(path: str | Path) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(str(exc)) from exc
    return parse_config_dict({s: dict(cp[s]) for s in cp.sections()})


# -- building blocks ----------------------------------------------------------

def build_system(cfg: RunConfig) -> HilbertSystem:
    s = cfg["system"]
    if s["model"] == "spin-boson":
        return spin_boson(s["omega"], s["eps"], s["alpha"])
    if s["model"] == "chain":
        return site_chain(s["d"], s["omega"], s["eps"], s["alpha"], s["periodic"])
    h0 = np.loadtxt(s["h0_file"], dtype=complex)
    v = np.loadtxt(s["v_file"], dtype=complex)
    return HilbertSystem(h0, v)


def noise_spec(cfg: RunConfig) -> CorrelationSpec:
    n = cfg["noise"]
    if n["mode"] == "markov":
        return CorrelationSpec("extrinsic", n["beta"], white=n["gamma"])
    if n["density_file"]:
        density = SpectralDensity.from_file(n["density_file"])
    else:
        density = SpectralDensity("ohmic", n["cutoff"])
    return CorrelationSpec(n["mode"], n["beta"], density)


def liouville_mode(cfg: RunConfig) -> str:
    return "intrinsic" if cfg["noise"]["mode"] == "intrinsic" else "extrinsic"


def initial_state(cfg: RunConfig, d: int) -> np.ndarray:
    rho = np.zeros((d, d), dtype=complex)
    try:
        site = int(cfg["system"]["initial"])
    except ValueError as exc:
        raise ConfigError("system.initial must be a basis-state index") from exc
    if not 0 <= site < d:
        raise ConfigError(f"initial state index {site} outside 0..{d - 1}")
    rho[site, site] = 1.0
    return rho


def ring_displacement(d: int, origin: int = 0, periodic: bool = True) -> np.ndarray:
    n = np.arange(d) - origin
    if periodic:
        n = np.minimum(np.abs(n), d - np.abs(n))
    return n.astype(float)


def observables_for(cfg: RunConfig, d: int) -> dict[str, np.ndarray]:
    s = cfg["system"]
    wanted = _words(cfg["output"]["observables"])
    out: dict[str, np.ndarray] = {}
    if s["model"] == "spin-boson" or (d == 2 and not wanted):
        sx, sy, sz = pauli()
        out = {"sx": sx, "sy": sy, "sz": sz}
    else:
        for n in range(d):
            p = np.zeros((d, d))
            p[n, n] = 1.0
            out[f"p{n + 1}"] = p
        disp = ring_displacement(d, int(s["initial"]), s["periodic"])
        out["msd"] = np.diag(disp ** 2)
    if wanted:
        missing = [w for w in wanted if w not in out]
        if missing:
            raise ConfigError(f"unknown observables: {', '.join(missing)}")
        out = {k: out[k] for k in wanted}
    return out


def correlation(cfg: RunConfig, steps: int | None = None, memory: int | None = None):
    disc = cfg["discretization"]
    n = disc["steps"] if steps is None else steps
    m = disc["memory"] if memory is None else memory
    return build_correlation_matrix(noise_spec(cfg), disc["tau"], n, min(m, n - 1))


def training_config(cfg: RunConfig, seed: int) -> TrainingConfig:
    s = cfg["stt"]
    return TrainingConfig(batch=s["batch"], learning_rate=s["learning_rate"], decay=s["decay"],
                          decay_every=s["decay_every"], max_steps=s["max_steps"],
                          target_loss=s["target_loss"], seed=seed, optimizer=s["optimizer"],
                          init_noise=s["init_noise"], batch_growth=s["batch_growth"],
                          max_batch=s["max_batch"])


def chebyshev_bases(ls, n_basis: int) -> list[ChebyshevBasis]:
    return [ChebyshevBasis(n_basis, lo, hi) for lo, hi in ls.frequency_range()]


def linking_sets(cfg: RunConfig, ls, out_dir: Path | None = None) -> LinkingMatrixSet:
    """Kernel factors for a run: exact ones, or the trained container on disk."""
    disc, noise = cfg["discretization"], cfg["noise"]
    if noise["mode"] == "markov":
        return markov_linking_set(ls, noise["gamma"], disc["tau"])
    memory = disc["memory"]
    if cfg["stt"]["kernel"] == "exact":
        table = correlation(cfg, memory + 1, memory).causal
        return exact_linking_set(table, ls.omegas(), memory)
    path = (out_dir or Path(cfg["output"]["directory"])) / "linking.qlm"
    if not path.exists():
        raise ConfigError(f"no trained kernel at {path}; run 'train' first")
    sets = LinkingMatrixSet.load(path)
    if sets.config_hash != cfg.hash:
        raise ConfigError("trained kernel was produced by a different configuration")
    return sets


# -- commands -----------------------------------------------------------------

def train_sets(cfg: RunConfig, seed: int) -> LinkingMatrixSet:
    """Train ``T_1 .. T_{M+1}`` for the configured system and noise."""
    ls = build_liouville(build_system(cfg), liouville_mode(cfg))
    memory = cfg["discretization"]["memory"]
    table = correlation(cfg, memory + 1, memory).causal
    bases = chebyshev_bases(ls, cfg["stt"]["n_basis"])
    return train_linking_set(table, bases, memory, training_config(cfg, seed),
                             bond=cfg["stt"]["bond"], config_hash=cfg.hash)


def cmd_train(cfg: RunConfig, out: Path, seed: int) -> int:
    sets = train_sets(cfg, seed)
    sets.save(out / "linking.qlm")
    for n, curve in enumerate(sets.curves, start=1):
        write_curve_csv(curve, out / f"curve_T{n}.csv")
        logger.info("T_%d final loss %.3e after %d steps", n, curve[-1], len(curve))
    return EXIT_OK


def run_propagation(cfg: RunConfig, out: Path | None, sets=None, bond_log=None):
    hs = build_system(cfg)
    ls = build_liouville(hs, liouville_mode(cfg))
    disc = cfg["discretization"]
    if sets is None:
        sets = linking_sets(cfg, ls, out)
    policy = SvdPolicy(cfg["stt"]["eps_svd"], cfg["stt"]["max_bond"])
    dyn = make_dynamics(ls, disc["tau"], sets, disc["steps"], policy)
    rho0 = initial_state(cfg, hs.dim)
    return propagate(dyn, rho0, observables_for(cfg, hs.dim),
                     renormalize=cfg["output"]["renormalize"], bond_log=bond_log)


def cmd_propagate(cfg: RunConfig, out: Path, seed: int) -> int:
    log: list = []
    series = run_propagation(cfg, out, bond_log=log)
    series.to_csv(out / "observables.csv")
    write_bond_log(log, out / "bonds.csv")
    logger.info("max trace deviation %.3e", series.trace_dev.max())
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, out: Path, seed: int) -> int:
    hs = build_system(cfg)
    ls = build_liouville(hs, liouville_mode(cfg))
    disc, orc = cfg["discretization"], cfg["oracle"]
    tau = disc["tau"]
    rho0 = initial_state(cfg, hs.dim)
    obs = observables_for(cfg, hs.dim)
    header = f"config_hash={cfg.hash}"
    n_path = orc["path_steps"]
    g = correlation(cfg, n_path, n_path - 1)
    ref = path_sum_series(ls, free_propagator(ls, tau), g, n_path, rho0, obs)
    ref.to_csv(out / "path_sum.csv", header_line=header)
    tau_fine = orc["tau_fine"] or tau
    t_max = orc["t_max"] or disc["steps"] * tau
    n_fine = int(round(t_max / tau_fine))
    mem = orc["mc_memory"]
    spec = noise_spec(cfg)
    gm = build_correlation_matrix(spec, tau_fine, n_fine, n_fine - 1 if mem is None else min(mem, n_fine - 1))
    mc = sle_monte_carlo(ls, spec, tau_fine, t_max, orc["n_traj"], seed, rho0, obs, correlation=gm)
    mc.to_csv(out / "monte_carlo.csv", header_line=header)
    return EXIT_OK


def linear_fit(x, y) -> tuple[float, float, float]:
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def scaling_run(cfg: RunConfig, dims, out: Path | None = None, seed: int = 0) -> list[dict]:
    """Memory of propagating the chain model for each ``d``.

    With a trained kernel the transfer functions are fitted per ``d`` before
    the measurement starts, so only propagation is measured.
    """
    rows = []
    for d in dims:
        sub = cfg.with_overrides(system={"model": "chain", "d": d}, output={"observables": "msd"})
        sets = None
        if sub["stt"]["kernel"] == "trained" and sub["noise"]["mode"] != "markov":
            sets = train_sets(sub, seed)
        log: list = []
        row = {"d": d, "status": "ok"}
        tracemalloc.start()
        t0 = time.perf_counter()
        try:
            run_propagation(sub, out, sets=sets, bond_log=log)
            _, peak = tracemalloc.get_traced_memory()
        except MemoryError:
            row["status"] = "resource"
            peak = 0
        finally:
            tracemalloc.stop()
        row["seconds"] = time.perf_counter() - t0
        row["peak_bytes"] = peak
        row["tensor_bytes"] = max((b for _, _, b in log), default=0)
        row["mean_tensor_bytes"] = float(np.mean([b for _, _, b in log])) if log else 0.0
        row["max_bond"] = max((b for _, b, _ in log), default=0)
        rows.append(row)
        logger.info("d=%d: peak %d B, tensors %d B, max bond %d", d, peak, row["tensor_bytes"],
                    row["max_bond"])
    return rows


def cmd_benchmark_scaling(cfg: RunConfig, out: Path, seed: int) -> int:
    dims = cfg["benchmark"]["dims"]
    rows = scaling_run(cfg, dims, out, seed)
    cols = ["d", "status", "peak_bytes", "tensor_bytes", "mean_tensor_bytes", "max_bond", "seconds"]
    with open(out / "scaling.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in cols) + "\n")
    ok = [r for r in rows if r["status"] == "ok"]
    if len(ok) >= 2:
        with open(out / "scaling_fit.csv", "w") as fh:
            fh.write("metric,slope,intercept,r2,loglog_exponent\n")
            for metric in ("peak_bytes", "tensor_bytes", "mean_tensor_bytes"):
                x = [r["d"] for r in ok]
                y = [r[metric] for r in ok]
                slope, icpt, r2 = linear_fit(x, y)
                expo = np.polyfit(np.log(x), np.log(np.maximum(y, 1)), 1)[0]
                fh.write(f"{metric},{slope:.6g},{icpt:.6g},{r2:.6f},{expo:.4f}\n")
                logger.info("%s: linear R^2 %.4f, log-log exponent %.3f", metric, r2, expo)
    return EXIT_OK if len(ok) == len(rows) else EXIT_RESOURCE


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


COMMANDS = {
    "train": cmd_train,
    "propagate": cmd_propagate,
    "oracle": cmd_oracle,
    "benchmark-scaling": cmd_benchmark_scaling,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qaspen", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--seed", type=int, default=None, help="overrides [output] seed")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    p.add_argument("--out", default=None, help="overrides [output] directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        seed = cfg["output"]["seed"] if args.seed is None else args.seed
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed must be non-negative")
        out = Path(args.out or cfg["output"]["directory"])
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out / "config.ini")
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be at least one")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return COMMANDS[args.command](cfg, out, seed)
        return COMMANDS[args.command](cfg, out, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, QuadratureError, CovarianceError, BondDimensionError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MemoryError, BudgetExceeded, OSError) as exc:
        print(f"resource failure: {exc}", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":
    sys.exit(main())
