import pytest

from eqrl.cli import (EXIT_ACCEPTANCE, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, UsageError,
                      build_parser, main, resolve)


def resolved(argv):
    return resolve(build_parser().parse_args(argv))


def test_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("EQRL_SEED", raising=False)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nseed = 5\nsteps = 123\nexploration-c = 0.25\n")
    args = resolved(["train-plain", "--config", str(cfg)])
    assert (args.seed, args.steps, args.exploration_c, args.mdp) == (5, 123, 0.25, "chain")
    assert resolved(["train-plain", "--config", str(cfg), "--seed", "7"]).seed == 7
    monkeypatch.setenv("EQRL_SEED", "9")
    assert resolved(["train-plain", "--config", str(cfg)]).seed == 9
    assert resolved(["train-plain", "--config", str(cfg), "--seed", "7"]).seed == 7
    assert resolved(["train-plain"]).steps == 200_000


def test_bad_config(tmp_path, monkeypatch):
    monkeypatch.delenv("EQRL_SEED", raising=False)
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    with pytest.raises(UsageError):
        resolved(["train-plain", "--config", str(cfg)])
    cfg.write_text("steps = many\n")
    with pytest.raises(UsageError):
        resolved(["train-plain", "--config", str(cfg)])
    cfg.write_text("no equals sign\n")
    assert main(["train-plain", "--config", str(cfg)]) == EXIT_USAGE
    monkeypatch.setenv("EQRL_SEED", "x")
    assert main(["train-plain", "--steps", "10", "--out", str(tmp_path)]) == EXIT_USAGE


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["train-plain", "--steps", "ten"],
    ["train-plain", "--alpha", "2"],
    ["train-plain", "--exploration-c", "1.5"],
    ["train-plain", "--mdp", "/no/such/file"],
    ["train-blocking", "--latency", "0"],
    ["bench-he", "--reps", "10"],
    ["train-encrypted", "--batch", "100000"],
    ["verify", "--only", "nonsense"],
])
def test_usage_errors(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)] if argv else argv) == EXIT_USAGE


def test_runtime_fault(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["train-plain", "--steps", "10", "--out", str(blocker / "sub")]) == EXIT_RUNTIME


def test_train_plain_reproducible(tmp_path, monkeypatch):
    monkeypatch.delenv("EQRL_SEED", raising=False)
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["train-plain", "--steps", "3000", "--seed", "4", "--out", str(out)]) == EXIT_OK
    assert (a / "final_q.csv").read_bytes() == (b / "final_q.csv").read_bytes()
    assert (a / "learning_curve.csv").read_text().startswith("step,max_abs_error")
    main(["train-plain", "--steps", "3000", "--seed", "5", "--out", str(b)])
    assert (a / "final_q.csv").read_bytes() != (b / "final_q.csv").read_bytes()


def test_train_plain_mdp_file(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("2 2 0.5\n0 0 1 1 0\n0 1 0 0 1\n1 0 0 1 0\n1 1 2 0 1\n")
    assert main(["train-plain", "--mdp", str(path), "--steps", "500", "--out", str(tmp_path)]) == EXIT_OK


def test_train_blocking(tmp_path):
    assert main(["train-blocking", "--latency", "3", "--steps", "2000", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert len(lines) == 2001


def test_fig_scenario(tmp_path):
    assert main(["train-blocking", "--scenario", "fig", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "fig_trace.csv").exists()


def test_verify_golden_mismatch(tmp_path, capsys):
    bad = tmp_path / "golden.csv"
    bad.write_text("kind,t,s,a,value\noffer,1,0,0,R\n")
    code = main(["verify", "--only", "golden-trace", "--golden", str(bad), "--out", str(tmp_path)])
    assert code == EXIT_ACCEPTANCE
    diff = tmp_path / "golden_trace.diff"
    assert diff.exists() and str(diff) in capsys.readouterr().out
    assert main(["verify", "--only", "golden-trace", "--out", str(tmp_path)]) == EXIT_OK


def test_train_encrypted(tmp_path):
    code = main(["train-encrypted", "--batch", "16", "--batches", "2", "--out", str(tmp_path)])
    assert code == EXIT_OK
    for name in ("learning_curve.csv", "op_report.tsv", "precision.tsv", "final_q.csv"):
        assert (tmp_path / name).exists()


def test_bench_he(tmp_path):
    assert main(["bench-he", "--reps", "100", "--warmup", "1", "--batch", "64",
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "bench_he.tsv").read_text().splitlines()
    assert rows[0].split("\t")[0] == "Type" and rows[-1].startswith("Total\t27")
    assert (tmp_path / "bench_he_share.tsv").read_text().startswith("metric")
