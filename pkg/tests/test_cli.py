import json
import subprocess
import sys

import numpy as np
import pytest

from diffem import cli, config, io, studies


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def points(tmp_path):
    x = studies.random_gmm(3, 2, 0)
    p = tmp_path / "x.csv"
    from diffem import gmm
    io.write_points_csv(p, gmm.sample_gmm(x, 120, 0))
    return str(p)


def test_fit_success_and_summary(tmp_path, capsys, points):
    cfg = write_json(tmp_path / "c.json", {"input": points, "K": 3, "em": {"T": 5}})
    code, out, _ = run(capsys, "fit", "--config", cfg, "--output", str(tmp_path / "o"), "--quiet")
    assert code == 0
    line = json.loads(out)
    assert line["command"] == "fit" and line["T"] == 5
    assert (tmp_path / "o" / "gmm.json").exists()
    assert io.read_gmm_json(tmp_path / "o" / "gmm.json").n_components == 3


def test_fit_is_deterministic(tmp_path, capsys, points):
    cfg = write_json(tmp_path / "c.json", {"input": points, "K": 2})
    for name in ("a", "b"):
        assert run(capsys, "fit", "--config", cfg, "--output", str(tmp_path / name), "--seed", "4")[0] == 0
    assert (tmp_path / "a" / "gmm.json").read_text() == (tmp_path / "b" / "gmm.json").read_text()


def test_invalid_config_writes_nothing(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"input": "x.csv", "K": 0})
    code, out, err = run(capsys, "fit", "--config", cfg, "--output", str(tmp_path / "o"))
    assert code == 1 and out == ""
    assert "K" in err
    assert not (tmp_path / "o").exists()


def test_unknown_key_and_bad_flags(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"bogus": 1})
    assert run(capsys, "flow", "--config", cfg)[0] == 1
    assert run(capsys, "no-such-command")[0] == 1
    assert run(capsys, "flow", "--workers", "0")[0] == 1
    assert run(capsys, "flow", "--config", str(tmp_path / "missing.json"))[0] == 1


def test_missing_input_file_writes_failure(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"input": str(tmp_path / "none.csv"), "K": 2})
    code, _, _ = run(capsys, "fit", "--config", cfg, "--output", str(tmp_path / "o"))
    assert code == 1
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["failure.json"]


def test_numerical_failure_exit_two(tmp_path, capsys):
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 5, axis=0)
    io.write_points_csv(tmp_path / "dup.csv", x)
    cfg = write_json(tmp_path / "c.json", {"input": str(tmp_path / "dup.csv"), "K": 3,
                                           "em": {"eps_r": 0.0}})
    code, _, err = run(capsys, "fit", "--config", cfg, "--output", str(tmp_path / "o"))
    assert code == 2
    manifest = json.loads((tmp_path / "o" / "failure.json").read_text())
    assert manifest["error"] == "DegenerateCovariance" and manifest["exit_code"] == 2
    assert [p.name for p in (tmp_path / "o").iterdir()] == ["failure.json"]


def test_malformed_image_exit_one(tmp_path, capsys):
    (tmp_path / "bad.png").write_bytes(b"garbage")
    cfg = write_json(tmp_path / "c.json", {"target": str(tmp_path / "bad.png")})
    code, _, _ = run(capsys, "texture", "--config", cfg, "--output", str(tmp_path / "o"))
    assert code == 1
    assert json.loads((tmp_path / "o" / "failure.json").read_text())["error"] == "MalformedImage"


def test_flow_toy_outputs(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"gd_steps": 3, "snapshot_every": 2})
    code, out, _ = run(capsys, "flow", "--config", cfg, "--output", str(tmp_path / "o"), "--quiet")
    assert code == 0
    names = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert names == ["energies.csv", "final_gmm.json", "final_points.csv", "snapshots", "weights.csv"]
    header = (tmp_path / "o" / "energies.csv").read_text().splitlines()[0]
    assert header == "step,energy,learning_rate"
    assert json.loads(out)["final_energy"] < json.loads(out)["initial_energy"]


def test_fixtures_and_selfcheck(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"which": ["e3", "vanishing"]})
    code, out, _ = run(capsys, "fixtures", "--config", cfg, "--output", str(tmp_path / "f"), "--quiet")
    assert code == 0 and json.loads(out)["e3"]["grid_points_lower"] == 0
    cfg = write_json(tmp_path / "s.json", {"instances": 3})
    code, out, _ = run(capsys, "selfcheck", "--config", cfg, "--output", str(tmp_path / "s"), "--quiet")
    assert code == 0 and json.loads(out)["passed"]


def test_colour_transfer_png(tmp_path, capsys):
    rng = np.random.default_rng(0)
    io.write_png(rng.uniform(0.2, 0.5, (10, 10, 3)), tmp_path / "a.png")
    io.write_png(rng.uniform(0.5, 0.9, (10, 10, 3)), tmp_path / "b.png")
    cfg = write_json(tmp_path / "c.json", {"source": str(tmp_path / "a.png"),
                                           "target": str(tmp_path / "b.png"), "K": 2, "gd_steps": 3,
                                           "unbalanced": {"lambda0": 10, "lambda1": 0.1}})
    code, out, _ = run(capsys, "colour-transfer", "--config", cfg, "--output", str(tmp_path / "o"),
                       "--quiet")
    assert code == 0 and json.loads(out)["unbalanced"]
    assert io.read_png(tmp_path / "o" / "output.png").shape == (10, 10, 3)


def test_workers_env(monkeypatch):
    monkeypatch.setenv("DIFFEM_WORKERS", "3")
    assert cli._workers(None) == 3
    assert cli._workers(2) == 2
    monkeypatch.setenv("DIFFEM_WORKERS", "x")
    with pytest.raises(config.ArgumentError):
        cli._workers(None)


def test_every_command_has_schema_and_driver():
    assert set(config.SCHEMAS) == set(config.COMMANDS) == set(cli.DRIVERS)


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "diffem.cli", "fixtures", "--output", str(tmp_path),
                           "--quiet", "--config", write_json(tmp_path / "c.json", {"which": ["e3"]})],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["command"] == "fixtures"


def test_fit_two_clusters_converges(tmp_path, capsys):
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-10, 1, (100, 2)), rng.normal(10, 1, (100, 2))])
    io.write_points_csv(tmp_path / "x.csv", x)
    cfg = write_json(tmp_path / "c.json", {"input": str(tmp_path / "x.csv"), "K": 2, "em": {"T": 30}})
    code, out, _ = run(capsys, "fit", "--config", cfg, "--output", str(tmp_path / "o"), "--quiet")
    assert code == 0 and json.loads(out)["residual"] <= 1e-10


def test_flow_csv_byte_identical(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"gd_steps": 4, "grad_method": "WARM"})
    for name in ("a", "b"):
        assert run(capsys, "flow", "--config", cfg, "--output", str(tmp_path / name), "--quiet")[0] == 0
    for f in ("energies.csv", "final_points.csv", "weights.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
