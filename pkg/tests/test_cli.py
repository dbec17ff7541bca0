import csv
import textwrap

import pytest

from qaspen.cli import (EXIT_CONFIG, EXIT_OK, EXIT_RESOURCE, ConfigError, load_config, main,
                        parse_config_dict, ring_displacement)

TRAIN_INI = """
[system]
model = spin-boson
[noise]
mode = intrinsic
[discretization]
tau = 0.25
steps = 3
memory = 1
[stt]
batch = 64
max_steps = 40
learning_rate = 0.01
optimizer = adam
"""


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return path


def read_rows(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


@pytest.mark.parametrize("body, message", [
    ("[nonsense]\nx = 1\n", "unknown section"),
    ("[system]\ncolour = red\n", "unknown keys"),
    ("[discretization]\ntau = fast\n", "tau"),
    ("[discretization]\nsteps = 3\nmemory = 3\n", "memory"),
    ("[noise]\nmode = pink\n", "noise mode"),
    ("[system]\nmodel = custom\n", "h0_file"),
    ("[benchmark]\ndims = 2 3\n", "powers of two"),
    ("[output]\nrenormalize = maybe\n", "boolean"),
    ("not an ini file", "section"),
])
def test_config_errors(tmp_path, body, message):
    with pytest.raises(ConfigError, match=message):
        load_config(write(tmp_path, body))


def test_config_error_exit_code(tmp_path, capsys):
    path = write(tmp_path, "[system]\nmodel = pendulum\n")
    assert main(["propagate", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["propagate", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG


def test_bad_flags(tmp_path):
    path = write(tmp_path, TRAIN_INI)
    assert main(["oracle", "--config", str(path), "--out", str(tmp_path), "--threads", "0"]) \
        == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(["fly", "--config", str(path)])


def test_hash_ignores_output_sections(tmp_path):
    a = load_config(write(tmp_path, TRAIN_INI))
    b = a.with_overrides(output={"directory": "elsewhere", "seed": 5})
    c = a.with_overrides(discretization={"tau": 0.5})
    assert a.hash == b.hash != c.hash


def test_defaults_fill_in():
    cfg = parse_config_dict({})
    assert cfg["discretization"]["memory"] == 4 and cfg["stt"]["n_basis"] == 10
    assert cfg["stt"]["bond"] is None


def test_ring_displacement():
    assert ring_displacement(6).tolist() == [0, 1, 2, 3, 2, 1]
    assert ring_displacement(4, 1, periodic=False).tolist() == [-1, 0, 1, 2]


def test_train_then_propagate(tmp_path):
    cfg = write(tmp_path, TRAIN_INI)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == EXIT_OK
    assert (out / "linking.qlm").exists() and (out / "config.ini").exists()
    assert [p.name for p in sorted(out.glob("curve_T*.csv"))] == ["curve_T1.csv", "curve_T2.csv"]
    first = (out / "linking.qlm").read_bytes()
    assert main(["propagate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    rows = read_rows(out / "observables.csv")
    assert len(rows) == 3 and set(rows[0]) >= {"t", "sx", "sy", "sz", "trace_dev"}
    assert len(read_rows(out / "bonds.csv")) == 3
    # the resolved config in the output directory reproduces the run
    again = tmp_path / "again"
    assert main(["train", "--config", str(out / "config.ini"), "--out", str(again),
                 "--seed", "3"]) == EXIT_OK
    assert (again / "linking.qlm").read_bytes() == first


def test_propagate_rejects_foreign_kernel(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(write(tmp_path, TRAIN_INI)), "--out", str(out)]) == EXIT_OK
    other = write(tmp_path, TRAIN_INI.replace("tau = 0.25", "tau = 0.2"), "other.ini")
    assert main(["propagate", "--config", str(other), "--out", str(out)]) == EXIT_CONFIG
    empty = tmp_path / "empty"
    assert main(["propagate", "--config", str(other), "--out", str(empty)]) == EXIT_CONFIG


def test_markov_chain_propagation(tmp_path):
    cfg = write(tmp_path, """
        [system]
        model = chain
        d = 4
        [noise]
        mode = markov
        gamma = 0.5
        [discretization]
        tau = 0.25
        steps = 4
        memory = 0
    """)
    out = tmp_path / "o"
    assert main(["propagate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    rows = read_rows(out / "observables.csv")
    assert set(rows[0]) >= {"p1", "p2", "p3", "p4", "msd"}
    total = sum(float(rows[-1][f"p{k}"]) for k in range(1, 5))
    assert total == pytest.approx(1.0, abs=1e-10)


def test_oracle_outputs_are_deterministic(tmp_path):
    cfg = write(tmp_path, """
        [noise]
        mode = extrinsic
        [discretization]
        steps = 3
        memory = 2
        [oracle]
        path_steps = 3
        n_traj = 50
    """)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["oracle", "--config", str(cfg), "--out", str(out), "--seed", "11"]) == EXIT_OK
        outs.append(out)
    for f in ("path_sum.csv", "monte_carlo.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    header = (outs[0] / "monte_carlo.csv").read_text().splitlines()[0]
    assert header == f"# config_hash={load_config(cfg).hash}"


def test_oracle_budget_is_a_resource_failure(tmp_path):
    cfg = write(tmp_path, "[discretization]\nsteps = 20\nmemory = 2\n[oracle]\npath_steps = 14\n")
    assert main(["oracle", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_RESOURCE


def test_benchmark_scaling(tmp_path):
    cfg = write(tmp_path, """
        [noise]
        mode = extrinsic
        [discretization]
        steps = 2
        memory = 1
        [stt]
        kernel = exact
        [benchmark]
        dims = 2 4
    """)
    out = tmp_path / "o"
    assert main(["benchmark-scaling", "--config", str(cfg), "--out", str(out),
                 "--threads", "1"]) == EXIT_OK
    rows = read_rows(out / "scaling.csv")
    assert [r["d"] for r in rows] == ["2", "4"] and all(r["status"] == "ok" for r in rows)
    assert all(int(r["peak_bytes"]) > 0 for r in rows)
    fit = read_rows(out / "scaling_fit.csv")
    assert [r["metric"] for r in fit] == ["peak_bytes", "tensor_bytes", "mean_tensor_bytes"]
