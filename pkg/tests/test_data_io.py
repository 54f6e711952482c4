import json
import math

import numpy as np
import pytest

from scopenet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from scopenet.config import ConfigError, DataConfig, ExperimentConfig, from_dict, load_config, save_config
from scopenet.data import generate_dataset, read_dataset, read_pgm, write_dataset, write_pgm
from scopenet.geometry import iou_matrix


def test_dataset_is_deterministic(tmp_path):
    p = DataConfig()
    a = write_dataset(tmp_path / "a", generate_dataset(20, p, seed=5), p, seed=5)
    b = write_dataset(tmp_path / "b", generate_dataset(20, p, seed=5), p, seed=5)
    for name in ("manifest.json", "annotations.jsonl", "images/000007.pgm"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = generate_dataset(20, p, seed=6)
    assert not np.array_equal(c[0].image, generate_dataset(1, p, seed=5)[0].image)


def test_scene_prefix_stable():
    p = DataConfig()
    short, long_ = generate_dataset(3, p, 9), generate_dataset(10, p, 9)
    for s, t in zip(short, long_):
        assert np.array_equal(s.image, t.image) and np.array_equal(s.boxes, t.boxes)


def test_constraints_hold():
    p = DataConfig(min_size=8.0, max_objects=6)
    for s in generate_dataset(200, p, 1):
        sides = np.concatenate([s.boxes[:, 2] - s.boxes[:, 0], s.boxes[:, 3] - s.boxes[:, 1]])
        assert sides.min() >= 8.0
        assert np.all(s.boxes >= 0) and np.all(s.boxes <= p.image_size)
        if len(s.boxes) > 1:
            m = iou_matrix(s.boxes, s.boxes)
            np.fill_diagonal(m, 0)
            assert m.max() <= p.max_iou
        assert 1 <= len(s.classes) <= 6 and set(s.classes.tolist()) <= {1, 2, 3}
        assert s.image.min() >= 0 and s.image.max() <= 1


def test_aspect_ratio_stress_split():
    p = DataConfig(aspect_range=(6.0, 8.0), min_size=4.0, max_size=56.0)
    ratios = []
    for s in generate_dataset(50, p, 3):
        w, h = s.boxes[:, 2] - s.boxes[:, 0], s.boxes[:, 3] - s.boxes[:, 1]
        ratios.extend(np.maximum(w / h, h / w).tolist())
    ratios = np.array(ratios)
    assert ratios.size > 0 and (ratios >= 6.0).mean() > 0.5
    assert ratios.max() <= 8.0


def test_pgm_round_trip(tmp_path):
    img = (np.arange(35).reshape(5, 7) / 34.0).astype(np.float32)
    img = (np.round(img * 255) / 255).astype(np.float32)
    write_pgm(tmp_path / "x.pgm", img)
    assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), img)


def test_dataset_round_trip(tmp_path):
    p = DataConfig()
    scenes = generate_dataset(5, p, 11)
    back = read_dataset(write_dataset(tmp_path, scenes, p, 11))
    for s, t in zip(scenes, back):
        np.testing.assert_array_equal(s.image, t.image)
        np.testing.assert_array_equal(s.boxes, t.boxes)
        np.testing.assert_array_equal(s.classes, t.classes)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 11 and manifest["count"] == 5


# --- checkpoint -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    arrays = {"w": np.random.default_rng(0).normal(size=(3, 2, 3, 3)), "b": np.arange(4, dtype=np.float32), "s": np.array(2.5)}
    save_checkpoint(tmp_path / "m.ckpt", arrays, {"step": 7, "note": "x"})
    got, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["step"] == 7 and meta["note"] == "x"
    for k, v in arrays.items():
        assert got[k].dtype == v.dtype and np.array_equal(got[k], v)
    assert (tmp_path / "m.ckpt").read_bytes().startswith(b"SCOPECKPT")


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTACKPT" * 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
    save_checkpoint(tmp_path / "ok", {"a": np.ones(100)})
    blob = (tmp_path / "ok").read_bytes()
    (tmp_path / "cut").write_bytes(blob[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut")


# --- config -----------------------------------------------------------------


def test_config_json_round_trip(tmp_path):
    cfg = ExperimentConfig().replace(model={"num_bins": 7}, infer={"nms_threshold": 0.6})
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg
    assert back.model.ranges[-1][1] == math.inf
    assert back.train_hash() == cfg.train_hash()


def test_hashes_separate_training_from_inference():
    base = ExperimentConfig()
    assert base.replace(infer={"scoring_mode": "cls_only"}).train_hash() == base.train_hash()
    assert base.replace(infer={"scoring_mode": "cls_only"}).infer_hash() != base.infer_hash()
    assert base.replace(model={"num_bins": 3}).train_hash() != base.train_hash()


@pytest.mark.parametrize(
    "raw,field",
    [
        ({"model": {"num_bins": 0}}, "model.num_bins"),
        ({"model": {"num_bins": "five"}}, "model.num_bins"),
        ({"model": {"bogus": 1}}, "model.bogus"),
        ({"infer": {"scoring_mode": "max"}}, "infer.scoring_mode"),
        ({"model": {"ranges": [[0, 32], [40, None]]}}, "model.ranges[1]"),
        ({"train": {"lr": -1}}, "train.lr"),
        ({"nonsense": {}}, "nonsense"),
    ],
)
def test_malformed_config_names_field(raw, field):
    with pytest.raises(ConfigError) as exc:
        from_dict(raw)
    assert exc.value.field == field
    assert field in str(exc.value)
