import json

import pytest

from vflsim.cli import main
from vflsim.compressors import CompressorSpec
from vflsim.config import ExperimentConfig, load_config, parse_config
from vflsim.protocol import ConfigError

TINY = """\
[algorithm]
kind = efvfl
eta = 0.05
rounds = 40
batch_size = full
seeds = 0,1

[compressor]
compressor = topk:0.25

[data]
dataset = quadratic
n_samples = 24
n_clients = 2
param_dims = 3
rep_dim = 2
data_seed = 0

[output]
dir = runs/tiny
diagnostics = true
"""


def write_config(tmp_path, text=TINY, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# --------------------------------------------------------------------- parsing


def test_parse_minimal():
    cfg = parse_config(TINY)
    assert cfg.kind == "efvfl"
    assert cfg.batch_size == "full"
    assert cfg.seeds == (0, 1)
    assert cfg.compressor == CompressorSpec("topk", fraction=0.25)
    assert cfg.diagnostics is True
    assert cfg.out_dir == "runs/tiny"


def test_parse_defaults():
    text = TINY.replace("seeds = 0,1\n", "").replace("diagnostics = true\n", "")
    cfg = parse_config(text)
    assert cfg.seeds == (0, 1, 2, 3, 4)
    assert cfg.diagnostics is False
    assert cfg.downlink_scheme is None
    assert cfg.weight_decay == 0.0


def test_parse_strips_quotes_and_lists():
    text = TINY.replace("kind = efvfl", 'kind = "efvfl"') \
               .replace("eta = 0.05", "eta = 0.05\neta_halve_epochs = 3, 5")
    cfg = parse_config(text)
    assert cfg.kind == "efvfl"
    assert cfg.eta_halve_epochs == (3, 5)


@pytest.mark.parametrize("mutation,needle", [
    (("kind = efvfl", "kind = efvfl\nmomentum = 0.9"), "UnknownKey"),
    (("[output]", "[outputs]"), "UnknownKey"),
    (("n_samples = 24", "hidden_dim = 8"), "UnknownKey"),
    (("kind = efvfl\n", ""), "MissingRequired"),
    (("rounds = 40", "rounds = 40\nepochs = 2"), "MissingRequired"),
    (("rounds = 40\n", ""), "MissingRequired"),
    (("seeds = 0,1", "seeds ="), "MissingRequired"),
    (("eta = 0.05", "eta = fast"), "TypeError"),
    (("rounds = 40", "rounds = 4.5"), "TypeError"),
    (("kind = efvfl", "kind = sgd"), "TypeError"),
    (("compressor = topk:0.25", "compressor = gzip"), "TypeError"),
    (("dataset = quadratic", "dataset = cifar"), "TypeError"),
    (("diagnostics = true", "diagnostics = maybe"), "TypeError"),
])
def test_parse_rejects(mutation, needle):
    old, new = mutation
    assert old in TINY
    with pytest.raises(ConfigError, match=needle):
        parse_config(TINY.replace(old, new))


def test_parse_rejects_bad_algorithm_combo():
    text = TINY.replace("kind = efvfl", "kind = efvfl_private\ndownlink_scheme = 1")
    with pytest.raises(ConfigError):
        parse_config(text)


def test_parse_rejects_nonpositive_batch():
    with pytest.raises(ConfigError):
        parse_config(TINY.replace("batch_size = full", "batch_size = 0"))


def test_resolve_rounds_from_epochs():
    cfg = parse_config(TINY.replace("rounds = 40", "epochs = 3")
                           .replace("batch_size = full", "batch_size = 10"))
    assert cfg.resolve_rounds(25) == 9  # ceil(25/10) = 3 rounds per epoch
    cfg.local_updates = 2
    assert cfg.resolve_rounds(25) == 6


def test_build_algorithm_resolves_full_batch():
    cfg = parse_config(TINY)
    algo = cfg.build_algorithm(24)
    assert algo.batch_size == 24 and algo.rounds == 40


def test_build_algorithm_rejects_oversized_batch():
    cfg = parse_config(TINY.replace("batch_size = full", "batch_size = 100"))
    with pytest.raises(ConfigError):
        cfg.build_algorithm(24)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


# ------------------------------------------------------------------------- CLI


def test_cli_dry_run(tmp_path, capsys):
    code = main(["run", write_config(tmp_path), "--dry-run"])
    out = capsys.readouterr().out
    assert code == 0
    assert "rounds         40" in out
    assert "topk:0.25" in out


def test_cli_bad_config_exits_2(tmp_path, capsys):
    path = write_config(tmp_path, TINY.replace("eta = 0.05", "eta = fast"))
    assert main(["run", path]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_missing_file_exits_2(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.ini")]) == 2
    capsys.readouterr()


def test_cli_run_writes_outputs(tmp_path, capsys):
    path = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", path, "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["seed"] == 0
    assert (out / "trace_seed0.csv").exists()
    assert (out / "summary_seed0.json").exists()


def test_cli_run_seed_override(tmp_path, capsys):
    path = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", path, "--seed", "7", "--out", str(out)]) == 0
    capsys.readouterr()
    assert (out / "trace_seed7.csv").exists()


def test_cli_outputs_are_byte_deterministic(tmp_path, capsys):
    path = write_config(tmp_path)
    for name, extra in (("a", []), ("b", []), ("c", ["--parallel"])):
        assert main(["run", path, "--out", str(tmp_path / name)] + extra) == 0
        capsys.readouterr()
    trace = (tmp_path / "a" / "trace_seed0.csv").read_bytes()
    assert (tmp_path / "b" / "trace_seed0.csv").read_bytes() == trace
    assert (tmp_path / "c" / "trace_seed0.csv").read_bytes() == trace
    summary = (tmp_path / "a" / "summary_seed0.json").read_bytes()
    assert (tmp_path / "b" / "summary_seed0.json").read_bytes() == summary
    assert (tmp_path / "c" / "summary_seed0.json").read_bytes() == summary


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_cli_divergence_exits_3(tmp_path, capsys):
    path = write_config(tmp_path, TINY.replace("eta = 0.05", "eta = 1e9"))
    assert main(["run", path, "--out", str(tmp_path / "out")]) == 3
    assert "diverged" in capsys.readouterr().err


def test_cli_sweep_aggregates(tmp_path, capsys):
    path = write_config(tmp_path)
    out = tmp_path / "sweep"
    assert main(["sweep", path, "--seeds", "2", "--out", str(out)]) == 0
    capsys.readouterr()
    agg = json.loads((out / "summary.json").read_text())
    assert agg["seeds"] == [0, 1]
    assert len(agg["runs"]) == 2
    assert agg["failed"] == []
    assert "final_loss" in agg["metrics"]


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_cli_sweep_reports_divergence(tmp_path, capsys):
    path = write_config(tmp_path, TINY.replace("eta = 0.05", "eta = 1e9"))
    out = tmp_path / "sweep"
    assert main(["sweep", path, "--seeds", "2", "--out", str(out)]) == 3
    capsys.readouterr()
    agg = json.loads((out / "summary.json").read_text())
    assert {f["seed"] for f in agg["failed"]} == {0, 1}


def test_cli_verify_passes_and_writes_report(tmp_path, capsys):
    path = write_config(tmp_path)
    out = tmp_path / "v"
    assert main(["verify", path, "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] is True
    names = [c["name"] for c in report["checks"]]
    assert names == ["gradient_fd", "lemma1", "lemma2", "theorem1", "theorem2"]
    assert json.loads((out / "verify.json").read_text()) == report


def test_cli_verify_skips_bounds_for_qsgd(tmp_path, capsys):
    path = write_config(tmp_path, TINY.replace("topk:0.25", "qsgd:4"))
    assert main(["verify", path]) == 0
    report = json.loads(capsys.readouterr().out)
    assert [c["name"] for c in report["checks"]] == ["gradient_fd"]
    assert report["skipped"] and "stochastic" in report["skipped"][0]["reason"]


def test_cli_verify_failure_exits_4(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr("vflsim.runner.GRADIENT_TOLERANCE", -1.0)
    assert main(["verify", write_config(tmp_path)]) == 4
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] is False
