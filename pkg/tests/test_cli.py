import csv
import json
import subprocess
import sys

import pytest

from pst import cli
from pst.checkpoint import Checkpoint
from pst.config import RunConfig, save_config
from pst.trainer import NumericalAbort, RunReport

SMALL = dict(n=8, k=6, samples=100, batch_size=16, r1=2, r2=2)


def write_cfg(tmp_path, name="c.toml", **kw):
    c = RunConfig(**{**SMALL, "total_steps": 10, "output_dir": str(tmp_path / "run"), **kw})
    p = tmp_path / name
    save_config(c, p)
    return p


def report(d) -> RunReport:
    return RunReport.from_json((d / "report.json").read_text())


def state(d):
    # wall-clock is checkpointed too, so leave it out
    ck = Checkpoint.load(d / "checkpoint.pst")
    return ck.meta, {k: a.tobytes() for k, a in ck.arrays.items() if k != "history.elapsed"}


def summary(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_smoke(tmp_path):
    assert cli.main(["train", "--config", str(write_cfg(tmp_path))]) == 0
    out = tmp_path / "run"
    names = {p.name for p in out.iterdir()}
    assert {"report.json", "checkpoint.pst", "config.toml", "structuredness_layer0.csv",
            "scatter_layer0.csv", "remaining_layer0.csv"} <= names
    assert report(out).steps_completed == 10


def test_train_is_deterministic_and_config_copy_reproduces(tmp_path):
    cfg = write_cfg(tmp_path)
    cli.main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "a")])
    cli.main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "b")])
    a, b = report(tmp_path / "a").comparable(), report(tmp_path / "b").comparable()
    a["config"].pop("output_dir"), b["config"].pop("output_dir")
    assert a == b
    # the written copy has every default filled in and reruns identically
    copy = tmp_path / "a" / "config.toml"
    assert "alpha1 = 1.0" in copy.read_text()
    first = report(tmp_path / "a").comparable()
    first_ckpt = state(tmp_path / "a")
    cli.main(["train", "--config", str(copy)])
    assert report(tmp_path / "a").comparable() == first
    assert state(tmp_path / "a") == first_ckpt


def test_seed_override(tmp_path):
    cfg = write_cfg(tmp_path)
    cli.main(["train", "--config", str(cfg), "--seed", "5"])
    assert report(tmp_path / "run").config["seed"] == 5


def test_resume_at_50_of_100_matches_uninterrupted(tmp_path):
    cfg = write_cfg(tmp_path, total_steps=100)
    full, part = tmp_path / "full", tmp_path / "part"
    assert cli.main(["train", "--config", str(cfg), "--output-dir", str(full)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--output-dir", str(part),
                     "--stop-after", "50"]) == 0
    assert report(part).steps_completed == 50
    assert cli.main(["train", "--config", str(cfg), "--output-dir", str(part),
                     "--resume", str(part / "checkpoint.pst")]) == 0
    a, b = report(full).comparable(), report(part).comparable()
    a["config"].pop("output_dir"), b["config"].pop("output_dir")
    assert a == b


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("bogus = 1\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "bogus" in capsys.readouterr().err
    bad.write_text("r1 = 0\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "r1" in capsys.readouterr().err
    assert cli.main(["train"]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
    good = write_cfg(tmp_path)
    (tmp_path / "junk.pst").write_bytes(b"garbage")
    assert cli.main(["train", "--config", str(good), "--resume", str(tmp_path / "junk.pst")]) == 2


def test_numerical_abort_exits_3(tmp_path, capsys):
    cfg = write_cfg(tmp_path, lr=1e300, total_steps=20)
    assert cli.main(["train", "--config", str(cfg)]) == 3
    assert "step" in capsys.readouterr().err


def test_rank_sweep_grid(tmp_path):
    cfg = write_cfg(tmp_path, total_steps=5)
    rc = cli.main(["sweep", "--config", str(cfg), "--axis", "r1", "--values", "4,8,16",
                   "--axis", "r2", "--values", "4,8,16"])
    assert rc == 0
    rows = summary(tmp_path / "run" / "sweep_summary.csv")
    assert [(r["r1"], r["r2"]) for r in rows] == [(a, b) for a in "4 8 16".split()
                                                  for b in "4 8 16".split()]
    assert all(r["status"] == "ok" and r["metric"] == "mse" for r in rows)
    assert report(tmp_path / "run" / "r1=16_r2=4").config["r1"] == 16


def test_sparsity_and_variant_sweeps(tmp_path):
    cfg = write_cfg(tmp_path, total_steps=5)
    cli.main(["sweep", "--config", str(cfg), "--axis", "sparsity", "--values", "0.5,0.9"])
    rows = summary(tmp_path / "run" / "sweep_summary.csv")
    assert [r["sparsity"] for r in rows] == ["0.5", "0.9"]
    cli.main(["sweep", "--config", str(cfg), "--axis", "variant", "--values", "all"])
    rows = summary(tmp_path / "run" / "sweep_summary.csv")
    assert len(rows) == 7
    assert {r["variant"] for r in rows} == {"full", "mag+lowrank", "mag+struct", "mag",
                                            "lowrank+struct", "lowrank", "struct"}


def test_failed_cells_are_marked(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, total_steps=5)
    real = cli.run_training

    def flaky(c, **kw):
        if c.r1 == 8:
            raise NumericalAbort(2, "layer layer0")
        return real(c, **kw)

    monkeypatch.setattr(cli, "run_training", flaky)
    assert cli.main(["sweep", "--config", str(cfg), "--axis", "r1", "--values", "0,4,8"]) == 0
    status = {r["r1"]: r["status"] for r in summary(tmp_path / "run" / "sweep_summary.csv")}
    assert status == {"0": "config error", "4": "ok", "8": "numerical abort"}


def test_sweep_bad_axis_values(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["sweep", "--config", str(cfg), "--axis", "r1", "--values", "a,b"]) == 2
    assert cli.main(["sweep", "--config", str(cfg), "--axis", "lr", "--values", "1"]) == 2


def test_parallel_sweep_matches_serial(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, total_steps=5)
    args = ["sweep", "--config", str(cfg), "--axis", "sparsity", "--values", "0.3,0.6,0.9"]
    cli.main(args + ["--output-dir", str(tmp_path / "serial")])
    monkeypatch.setenv("PST_THREADS", "2")
    cli.main(args + ["--output-dir", str(tmp_path / "par")])
    read = lambda d: [{k: v for k, v in r.items()} for r in summary(d / "sweep_summary.csv")]
    assert read(tmp_path / "serial") == read(tmp_path / "par")


def test_compare(tmp_path):
    dirs = []
    for crit in ("map", "mvp", "pst"):
        d = tmp_path / crit
        cfg = write_cfg(tmp_path, name=f"{crit}.toml", criterion=crit, output_dir=str(d))
        cli.main(["train", "--config", str(cfg)])
        dirs.append(str(d))
    out = tmp_path / "cmp"
    assert cli.main(["compare", *dirs, "--output-dir", str(out)]) == 0
    rows = summary(out / "similarity.csv")
    assert list(rows[0]) == ["layer", "role", "depth", "pair", "similarity"]
    assert {r["pair"] for r in rows} == {"map|mvp", "map|pst", "mvp|pst"}
    assert all(0 < float(r["similarity"]) <= 1 for r in rows)
    assert cli.main(["compare", dirs[0], dirs[0], "--output-dir", str(out)]) == 0
    assert all(float(r["similarity"]) == 1.0 for r in summary(out / "similarity.csv"))


def test_compare_errors(tmp_path):
    a = write_cfg(tmp_path, name="a.toml", output_dir=str(tmp_path / "a"))
    b = write_cfg(tmp_path, name="b.toml", n=10, output_dir=str(tmp_path / "b"))
    cli.main(["train", "--config", str(a)])
    cli.main(["train", "--config", str(b)])
    assert cli.main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == 2
    assert cli.main(["compare", str(tmp_path / "a")]) == 2
    assert cli.main(["compare", str(tmp_path / "a"), str(tmp_path / "nowhere")]) == 2


def test_console_script(tmp_path):
    cfg = write_cfg(tmp_path, total_steps=3)
    proc = subprocess.run([sys.executable, "-m", "pst.cli", "train", "--config", str(cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "mse" in proc.stdout
    data = json.loads((tmp_path / "run" / "report.json").read_text())
    assert data["steps_completed"] == 3
