import csv
import json
import logging

import numpy as np
import pytest

from advdepth import metrics, models, netpbm
from advdepth.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, render_report


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """A small dataset and one-epoch models shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--count", "10", "--size", "16", "--seed", "7", "--out", str(root / "ds")]) == 0
    for args in (
        ["--arch", "arch-A", "--out", str(root / "a.bin")],
        ["--arch", "arch-B", "--out", str(root / "b.bin")],
        ["--task", "seg", "--out", str(root / "s.bin")],
    ):
        assert main(["train", "--data", str(root / "ds"), "--epochs", "1", *args]) == 0
    return root


def test_gen_is_deterministic(tmp_path, monkeypatch):
    for name in ("x", "y"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        assert main(["gen", "--count", "4", "--size", "16", "--seed", "7", "--out", "ds"]) == 0
    assert tree(tmp_path / "x") == tree(tmp_path / "y")


def test_gen_zero_count(tmp_path):
    assert main(["gen", "--count", "0", "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "index.csv").read_text() == "id,split,instances\n"
    assert main(["verify", "--data", str(tmp_path / "e")]) == 0


def test_gen_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen", "--count", "1", "--out", str(blocker / "sub")]) == EXIT_DATA


def test_gen_echoes_config(ws):
    cfg = json.loads((ws / "ds" / "config.json").read_text())
    assert cfg["count"] == 10 and cfg["seed"] == 7 and cfg["size"] == [16, 16]


def test_verify_detects_corruption(tmp_path):
    main(["gen", "--count", "2", "--size", "16", "--seed", "1", "--val-fraction", "0", "--out", str(tmp_path / "d")])
    assert main(["verify", "--data", str(tmp_path / "d")]) == 0
    path = tmp_path / "d" / "train" / "000000.depth.pfm"
    depth = netpbm.read_pfm(path)
    depth[0, 0] = 500.0
    netpbm.write_pfm(path, depth)
    assert main(["verify", "--data", str(tmp_path / "d")]) == EXIT_DATA


def test_verify_missing_dataset(tmp_path):
    assert main(["verify", "--data", str(tmp_path / "nothing")]) == EXIT_DATA


def test_train_zero_epochs_equals_init(ws, tmp_path):
    out = tmp_path / "z.bin"
    assert main(["train", "--data", str(ws / "ds"), "--epochs", "0", "--seed", "3", "--out", str(out)]) == 0
    assert out.read_bytes() == models.new_depth_net("arch-A", 3).to_bytes()


def test_train_report(ws):
    rep = json.loads((ws / "a.bin.report.json").read_text())
    assert rep["report"]["heldout_rmse"] > 0
    assert rep["config"]["lr"] == 0.01
    seg = json.loads((ws / "s.bin.report.json").read_text())
    assert 0 <= seg["report"]["heldout_accuracy"] <= 1


def test_arch_param_counts_differ(ws):
    a = (ws / "a.bin").read_bytes().split(b"\n", 1)[0].split()
    b = (ws / "b.bin").read_bytes().split(b"\n", 1)[0].split()
    assert a[0] == b[0] == b"DAVNET"
    assert a[2] != b[2]


def test_train_numerical_failure(ws, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 1e300, "epochs": 2}))
    args = ["train", "--config", str(cfg), "--data", str(ws / "ds"), "--out", str(tmp_path / "n.bin")]
    with np.errstate(all="ignore"):
        assert main(args) == EXIT_NUMERIC


def test_zero_budget_attack(ws, tmp_path):
    out = tmp_path / "at"
    args = ["attack", "--method", "fgsm", "--epsilon", "0", "--model", str(ws / "a.bin"), "--data", str(ws / "ds")]
    assert main([*args, "--out", str(out), "--save-images"]) == 0
    rows = metrics.read_csv(out / "report.csv")
    assert rows and all(r[3].rmse_ratio == 1.0 for r in rows)
    for sid, *_ in rows:
        clean = netpbm.read_pnm(ws / "ds" / "validation" / f"{sid}.rgb.ppm")
        assert np.array_equal(netpbm.read_pnm(out / "adv" / f"{sid}.rgb.ppm"), clean)


def test_attack_config_echo_and_quantisation(ws, tmp_path):
    out = tmp_path / "q"
    assert main(["attack", "--model", str(ws / "a.bin"), "--data", str(ws / "ds"), "--out", str(out)]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["method"] == "ifgsm" and cfg["epsilon"] == 16.0
    assert cfg["quantization"]["max_rounding_gap"] <= 0.5
    assert cfg["quantization"]["max_quantized_linf"] <= 16.0


def test_targeted_sweep_reports_each_target(ws, tmp_path):
    out = tmp_path / "t"
    targets = "4.4,20.2,31.0,44.7,54.8,68.5,80.8"
    args = ["attack", "--mode", "targeted", "--method", "mifgsm", "--iterations", "3", "--target-depth", targets]
    args += ["--model", str(ws / "a.bin"), "--data", str(ws / "ds"), "--split", "train", "--out", str(out)]
    assert main(args) == 0
    rows = metrics.read_csv(out / "report.csv")
    seen = sorted({r[4] for r in rows})
    assert seen == sorted(float(t) for t in targets.split(","))
    assert all(r[3].adv_mmd is not None for r in rows)


def test_black_box_eval_uses_other_model(ws, tmp_path):
    base = ["attack", "--iterations", "2", "--model", str(ws / "a.bin"), "--data", str(ws / "ds")]
    assert main([*base, "--out", str(tmp_path / "w")]) == 0
    assert main([*base, "--eval-model", str(ws / "b.bin"), "--out", str(tmp_path / "b")]) == 0
    w = metrics.read_csv(tmp_path / "w" / "report.csv")
    b = metrics.read_csv(tmp_path / "b" / "report.csv")
    assert [r[3].clean_rmse for r in w] != [r[3].clean_rmse for r in b]


def test_universal_single_task_skips_seg(ws, tmp_path, caplog):
    out = tmp_path / "u"
    args = ["universal", "--weights", "1,0", "--iterations", "2", "--epochs", "1"]
    args += ["--depth-model", str(ws / "a.bin"), "--seg-model", str(ws / "s.bin"), "--data", str(ws / "ds")]
    with caplog.at_level(logging.INFO, logger="advdepth"):
        assert main([*args, "--out", str(out)]) == 0
    messages = [r.getMessage() for r in caplog.records]
    assert any("loading depth model" in m for m in messages)
    assert not any("segmentation" in m for m in messages)
    assert (out / "delta_1_0.bin").read_bytes().startswith(b"DAVUAP 16.0 ")


def test_universal_comparison(ws, tmp_path, caplog):
    out = tmp_path / "u2"
    args = ["universal", "--weights", "0.5,0.5", "--weights", "1,0", "--iterations", "2", "--epochs", "1"]
    args += ["--depth-model", str(ws / "a.bin"), "--seg-model", str(ws / "s.bin"), "--data", str(ws / "ds")]
    with caplog.at_level(logging.INFO, logger="advdepth"):
        assert main([*args, "--out", str(out)]) == 0
    assert any("loading segmentation model" in r.getMessage() for r in caplog.records)
    with open(out / "comparison.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["setting"] for r in rows] == ["multi-task", "single-task"]
    assert all(float(r["rmse-ratio"]) > 0 for r in rows)
    per_image = metrics.read_csv(out / "universal.csv")
    assert {r[2] for r in per_image} == {"multi-task:0.5_0.5", "single-task:1_0"}


def test_universal_needs_seg_model(ws, tmp_path):
    args = ["universal", "--weights", "0.5,0.5", "--depth-model", str(ws / "a.bin"), "--data", str(ws / "ds")]
    assert main([*args, "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_wrong_checkpoint_kind(ws, tmp_path):
    args = ["attack", "--model", str(ws / "s.bin"), "--data", str(ws / "ds"), "--out", str(tmp_path / "x")]
    assert main(args) == EXIT_DATA


def test_report_empty(tmp_path):
    out = tmp_path / "r.md"
    assert main(["report", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    table = [line for line in lines if line.startswith("|")]
    assert len(table) == 2


def test_report_aggregation_matches_manual_means(tmp_path):
    values = [(4.0, 10.0), (5.0, 16.0), (3.0, 3.0), (6.0, 20.0), (2.0, 9.0)]
    rows = [(f"{i:06d}", "fgsm", "non-targeted", metrics.ratio_report(c, a), None) for i, (c, a) in enumerate(values)]
    src = tmp_path / "run"
    src.mkdir()
    metrics.write_csv(src / "report.csv", rows)
    out = tmp_path / "r.md"
    assert main(["report", "--in", str(src / "report.csv"), "--out", str(out)]) == 0
    line = [x for x in out.read_text().splitlines() if x.startswith("| run |")][0]
    cells = [c.strip() for c in line.strip("|").split("|")]
    clean = (4 + 5 + 3 + 6 + 2) / 5
    adv = (10 + 16 + 3 + 20 + 9) / 5
    assert cells[4] == "5"
    assert cells[5] == f"{clean:.3f}" and cells[6] == f"{adv:.3f}"
    assert cells[7] == metrics.format_ratio(metrics.ratio_report(clean, adv).rmse_ratio) == "2.9×"


def test_render_groups_by_target():
    rep = metrics.ratio_report(1.0, 1.0, 20.0, 40.0)
    rows = [("s", "1", "mifgsm", "targeted", rep, 40.0), ("s", "2", "mifgsm", "targeted", rep, 80.0)]
    text = render_report(rows)
    assert text.count("| s | mifgsm | targeted |") == 2


def test_report_missing_input(tmp_path):
    assert main(["report", "--in", str(tmp_path / "no.csv"), "--out", str(tmp_path / "r.md")]) == EXIT_DATA


def test_config_file_and_flag_override(ws, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"count": 3, "seed": 2, "size": "16x24", "out": str(tmp_path / "from-file")}))
    assert main(["gen", "--config", str(cfg), "--count", "2"]) == 0
    echoed = json.loads((tmp_path / "from-file" / "config.json").read_text())
    assert echoed["count"] == 2 and echoed["seed"] == 2 and echoed["size"] == [16, 24]


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["gen"],
        ["gen", "--count", "x", "--out", "o"],
        ["gen", "--size", "10", "--out", "o"],
        ["attack", "--model", "m", "--data", "d", "--out", "o", "--epsilon", "-1"],
        ["universal", "--weights", "1", "--depth-model", "m", "--data", "d", "--out", "o"],
    ],
)
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"not_an_option": 1}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    cfg.write_text("{")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "universal" in capsys.readouterr().out
