import csv
import json

import pytest

from scopenet.cli import main
from scopenet.config import ExperimentConfig

SMALL = {
    "data": {"train_count": 6, "test_count": 4},
    "model": {"backbone_channels": [2, 3, 4], "head_channels": 4, "trunk_depth": 1},
    "train": {"steps": 4, "batch_size": 2, "warmup_steps": 1, "log_every": 1},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_train_then_eval_writes_metrics(tmp_path, small_config, capsys):
    out = tmp_path / "runs"
    code, res = run(capsys, "train", "--config", small_config, "--out", out)
    assert code == 0
    rd = out / ExperimentConfig().replace(**SMALL).train_hash()
    assert res.out.strip() == str(rd)
    assert (rd / "model.ckpt").exists() and (rd / "config.json").exists()
    records = [json.loads(line) for line in (rd / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [0, 1, 2, 3]
    assert {"L_cls", "L_bin", "L_loc", "L_total", "num_cls_positive"} <= set(records[0])

    code, res = run(capsys, "eval", "--config", small_config, "--out", out, "--pr-curve", tmp_path / "pr.csv")
    assert code == 0
    metrics = json.loads(res.out)
    assert {"AP", "AP50", "AP75", "AR10", "AR100"} <= set(metrics)
    assert next(csv.reader(open(tmp_path / "pr.csv"))) == ["recall", "precision"]
    # the resolved config sits next to the metrics
    ed = next(rd.glob("eval-*"))
    assert json.loads((ed / "config.json").read_text())["model"]["num_bins"] == 5


def test_nms_threshold_changes_post_processing_only(tmp_path, small_config, capsys):
    out = tmp_path / "runs"
    run(capsys, "train", "--config", small_config, "--out", out)
    ckpt = next(out.glob("*/model.ckpt"))
    mtime = ckpt.stat().st_mtime_ns
    code, _ = run(capsys, "infer", "--config", small_config, "--out", out)
    code2, _ = run(capsys, "infer", "--config", small_config, "--out", out, "--nms-threshold", "0.6")
    assert code == code2 == 0
    assert len(list(out.glob("*/model.ckpt"))) == 1 and ckpt.stat().st_mtime_ns == mtime
    evals = sorted(ckpt.parent.glob("eval-*"))
    assert len(evals) == 2
    thresholds = {json.loads((e / "config.json").read_text())["infer"]["nms_threshold"] for e in evals}
    assert thresholds == {0.5, 0.6}
    for e in evals:
        for line in (e / "detections.jsonl").read_text().splitlines():
            assert set(json.loads(line)) == {"image_id", "class", "x1", "y1", "x2", "y2", "p_cls", "p_loc", "p_box"}


def test_identical_runs_give_identical_metrics(tmp_path, small_config, capsys):
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        run(capsys, "train", "--config", small_config, "--out", out, "--seed", "3")
        code, res = run(capsys, "eval", "--config", small_config, "--out", out, "--seed", "3", "--threads", "1")
        assert code == 0
        blobs.append(res.out.encode())
        blobs.append(next(out.glob("*/eval-*/metrics.json")).read_bytes())
    assert blobs[0] == blobs[2] and blobs[1] == blobs[3]


def test_environment_sets_output_root(tmp_path, small_config, capsys, monkeypatch):
    monkeypatch.setenv("SCOPENET_OUT", str(tmp_path / "env-root"))
    code, res = run(capsys, "gen-data", "--config", small_config)
    assert code == 0
    root = tmp_path / "env-root"
    assert (next(root.glob("*/data/train")) / "manifest.json").exists()
    assert len(list(next(root.glob("*/data/test")).glob("images/*.pgm"))) == 4


@pytest.mark.parametrize(
    "payload,field",
    [('{"model": {"num_bins": -2}}', "model.num_bins"), ('{"train": {"lr": "fast"}}', "train.lr"), ("{not json", "<file>")],
)
def test_malformed_config_exits_2(tmp_path, capsys, payload, field):
    path = tmp_path / "bad.json"
    path.write_text(payload)
    code, res = run(capsys, "train", "--config", path, "--out", tmp_path)
    assert code == 2
    assert field in res.err


def test_flags_map_onto_config(tmp_path, capsys):
    code, res = run(capsys, "train", "--levels", "0,32", "--out", tmp_path)
    assert code == 2 and "model.ranges" in res.err
    from scopenet.cli import build_parser, resolve_config

    args = build_parser().parse_args(["eval", "--levels", "32,64", "--no-uncertainty", "--scoring-mode", "cls_only", "--seed", "4"])
    cfg = resolve_config(args)
    assert cfg.model.ranges == [(0.0, 32.0), (32.0, 64.0), (64.0, float("inf"))]
    assert not cfg.model.uncertainty and cfg.infer.scoring_mode == "cls_only" and cfg.seed == 4


def test_missing_checkpoint_is_an_error(tmp_path, small_config, capsys):
    code, res = run(capsys, "eval", "--config", small_config, "--out", tmp_path)
    assert code == 1 and "eval" in res.err


def test_sweep_grid_and_cache(tmp_path, small_config, capsys):
    out = tmp_path / "runs"
    code, res = run(capsys, "sweep", "--config", small_config, "--out", out, "--sizes", "0.75,1.25", "--nums", "1,3")
    assert code == 0
    rows = list(csv.reader(res.out.splitlines()))
    assert rows[0] == ["size", "num", "AP", "AP50", "AP75", "APS", "APM", "APL"]
    assert [r[:2] for r in rows[1:]] == [["-", "1"], ["0.75", "3"], ["1.25", "3"]]
    ckpts = {p: p.stat().st_mtime_ns for p in out.glob("*/model.ckpt")}
    assert len(ckpts) == 3
    code, res2 = run(capsys, "sweep", "--config", small_config, "--out", out, "--sizes", "0.75,1.25", "--nums", "1,3")
    assert res2.out == res.out
    assert {p: p.stat().st_mtime_ns for p in out.glob("*/model.ckpt")} == ckpts


def test_sweep_default_grid_has_ten_rows():
    from scopenet.experiments import sweep_grid

    grid = sweep_grid()
    assert len(grid) == 10 and grid[0] == (None, 1)


def test_sweep_records_failed_cells(tmp_path, small_config, capsys, monkeypatch):
    import scopenet.experiments as ex

    real = ex.train_run

    def flaky(cfg, out=None):
        if cfg.model.num_bins == 7:
            raise RuntimeError("diverged")
        return real(cfg, out)

    monkeypatch.setattr(ex, "train_run", flaky)
    out = tmp_path / "runs"
    code, res = run(capsys, "sweep", "--config", small_config, "--out", out, "--sizes", "1.25", "--nums", "3,7")
    assert code == 0
    rows = list(csv.reader(res.out.splitlines()))
    assert rows[1][2] != "nan" and rows[2][2] == "nan"
    failures = json.loads(next(out.glob("sweep-*/failures.json")).read_text())
    assert [f["num"] for f in failures] == [7] and "diverged" in failures[0]["error"]


def test_gradcheck_passes_and_reports_anchor_group(capsys):
    code, res = run(capsys, "gradcheck")
    assert code == 0
    header = res.out.splitlines()[0]
    assert "anchors" in header and "loc_head" in header
    assert [line.split()[0] for line in res.out.splitlines()[1:5]] == ["L_cls", "L_bin", "L_loc", "L_total"]


def test_gradcheck_corrupted_derivative_fails(capsys):
    code, res = run(capsys, "gradcheck", "--corrupt-op", "pow2", "--corrupt-factor", "1.01")
    assert code == 1
    assert "FAIL anchors" in res.out
