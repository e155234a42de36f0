import csv
import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from dlrecon.cli import main
from dlrecon.config import ExperimentConfig
from dlrecon.harness import CaseRun
from dlrecon.io import read_raw, write_raw
from dlrecon.neural import load_network
from dlrecon.recon import single_pass

MICRO = Path(__file__).resolve().parents[1] / "configs" / "micro.json"


def tree_hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("DLRECON_ROOT", str(tmp_path))
    return tmp_path


def test_unknown_subcommand_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen-data", "--frobnicate"])
    assert info.value.code != 0


def test_bad_override_reports_on_stderr(root, capsys):
    assert main(["gen-data", "--config", str(MICRO), "--set", "side=1"]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(root / "missing.json")]) == 1


def test_gen_data_is_reproducible(root):
    args = ["gen-data", "--config", str(MICRO), "--set", "scenarios=[\"model_error_noise\"]"]
    assert main(args + ["--set", "output_dir=a"]) == 0
    assert main(args + ["--set", "output_dir=b"]) == 0
    a, b = tree_hashes(root / "a"), tree_hashes(root / "b")
    assert a and a == b
    assert "60D_N/data/test/sinograms_noisy.raw" in a


def test_stagewise_pipeline(root, capsys):
    base = ["--config", str(MICRO), "--set", "scenarios=[\"inverse_crime\"]"]
    assert main(["train", "--stage", "1"] + base) == 0
    case_dir = root / "micro" / "60D_IC"
    assert (case_dir / "weights" / "stage1.json").exists()
    assert not (case_dir / "weights" / "stage2.json").exists()
    assert main(["train", "--stage", "2"] + base) == 0
    assert (case_dir / "weights" / "stage2.json").exists()

    assert main(["sweep-lambda"] + base) == 0
    assert "60D_IC: lambda =" in capsys.readouterr().out
    assert main(["sweep-lambda", "--oracle-lambda"] + base) == 0
    lines = (case_dir / "lambda_oracle.csv").read_text().splitlines()
    assert lines[0] == "image,lambda" and len(lines) == 6

    assert main(["evaluate"] + base) == 0
    rows = list(csv.DictReader(open(root / "micro" / "report.csv")))
    assert [r["method"] for r in rows] == ["LS", "PLS-TV", "single-pass", "proposed"]

    # reconstruct with n=1 reproduces the single-pass code path byte for byte
    cfg = ExperimentConfig.load(MICRO, ["scenarios=[\"inverse_crime\"]"])
    run = CaseRun(cfg, cfg.cases[0], case_dir)
    g = run.dataset("test").samples[0].data
    write_raw(root / "g.raw", g, {})
    out = root / "img.raw"
    assert main(["reconstruct", "--sinogram", str(root / "g.raw"), "--weights",
                 str(case_dir / "weights" / "stage2.json"), "--n", "1", "--out", str(out)] + base) == 0
    # the raw sinogram went through float32 on disk, so reuse the stored values
    g32, _ = read_raw(root / "g.raw")
    H = run.operator
    ref = single_pass(H.normalize_data(g32), H, load_network(case_dir / "weights" / "stage2.json"),
                      run.recon_config, run.factors)
    write_raw(root / "ref.raw", ref, {})
    assert out.read_bytes() == (root / "ref.raw").read_bytes()
    assert out.with_suffix(".pgm").read_bytes().startswith(b"P5\n32 32\n255\n")
    assert json.loads(Path(str(out) + ".json").read_text())["n_outer"] == 1

    # a stacked dataset file works with --index
    assert main(["gen-data"] + base) == 0
    stack = case_dir / "data" / "test" / "sinograms_clean.raw"
    assert main(["reconstruct", "--sinogram", str(stack), "--index", "0", "--weights",
                 str(case_dir / "weights" / "stage2.json"), "--n", "1", "--out", str(out)] + base) == 0
    assert out.read_bytes() == (root / "ref.raw").read_bytes()
    assert main(["reconstruct", "--sinogram", str(stack), "--index", "99", "--weights",
                 str(case_dir / "weights" / "stage2.json"), "--out", str(out)] + base) == 1


def test_reconstruct_rejects_wrong_shape(root, capsys):
    write_raw(root / "g.raw", np.zeros((3, 3)), {})
    code = main(["reconstruct", "--config", str(MICRO), "--sinogram", str(root / "g.raw"),
                 "--weights", str(root / "none.json"), "--out", str(root / "x.raw")])
    assert code == 1 and "does not match" in capsys.readouterr().err


def test_run_all_emits_reports(root):
    assert main(["run-all", "--config", str(MICRO)]) == 0
    out = root / "micro"
    for name in ("report.csv", "config.json", "timings.json", "60D_IC/trace_fig1.csv",
                 "60D_N/per_image.csv", "60D_N/weights/stage2.json"):
        assert (out / name).exists(), name
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert len(rows) == 8 and {r["status"] for r in rows} == {"ok"}
    shutil.rmtree(out)
