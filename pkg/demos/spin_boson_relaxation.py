"""Relaxation of a biased two-level system coupled to an ohmic heat bath.

Trains the transfer functions for memory length 4, propagates for 60 steps
and checks the first four steps against the brute-force path sum.

    python3 demos/spin_boson_relaxation.py [out_dir]
"""
import sys
import time
from pathlib import Path

import numpy as np

from qaspen.cli import parse_config_dict, run_propagation, train_sets
from qaspen.liouville import build_liouville, free_propagator, pauli, spin_boson
from qaspen.noise import CorrelationSpec, SpectralDensity, build_correlation_matrix
from qaspen.oracle import path_sum_series
from qaspen.propagator import make_dynamics, propagate
from qaspen.stt_kernel import LinkingMatrixSet


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = parse_config_dict({})  # spin-boson, intrinsic noise, tau 0.25, M = 4
    start = time.perf_counter()
    sets = train_sets(cfg, seed=0)
    print(f"trained T_1..T_5 in {time.perf_counter() - start:.1f} s; final losses",
          ", ".join(f"{c[-1]:.1e}" for c in sets.curves))

    series = run_propagation(cfg, None, sets=sets)
    series.to_csv(out / "spin_boson.csv")
    print(f"<sz> at t = {series.times[-1]:g}: {series.values['sz'][-1]:+.4f}; "
          f"max trace deviation {series.trace_dev.max():.1e}")

    sx, sy, sz = pauli()
    obs = {"sx": sx, "sy": sy, "sz": sz}
    ls = build_liouville(spin_boson(), "intrinsic")
    g = build_correlation_matrix(CorrelationSpec("intrinsic", 1.0, SpectralDensity()), 0.25, 4, 3)
    up = np.diag([1.0, 0.0]).astype(complex)
    ref = path_sum_series(ls, free_propagator(ls, 0.25), g, 4, up, obs)
    short = propagate(make_dynamics(ls, 0.25, LinkingMatrixSet(sets.transfers[:4], 3), 4), up, obs)
    worst = max(np.abs(short.values[k] - ref.values[k]).max() for k in obs)
    print(f"largest deviation from the path sum over four steps: {worst:.1e}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out"))
