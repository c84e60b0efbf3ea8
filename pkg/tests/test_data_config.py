import gzip
import json
from pathlib import Path

import numpy as np
import pytest

from hefl.bus import MessageBus
from hefl.config import ScenarioConfig, load_config, preset_model
from hefl.data import (
    dirichlet_split, even_split, load_csv, load_digits, load_idx, make_blobs, read_idx, write_csv, write_idx,
)
from hefl.errors import ConfigError
from hefl.neural import LabeledDataset

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_digits_shape_and_range():
    d = load_digits()
    assert d.inputs.shape == (1797, 1, 8, 8)
    assert d.inputs.min() == 0.0 and d.inputs.max() == 1.0
    assert d.num_classes == 10


def test_blobs_scaled():
    d = make_blobs(90, 3, 4, 1.0, 0)
    assert d.inputs.shape == (90, 3) and d.num_classes == 4
    assert d.inputs.min() == 0.0 and d.inputs.max() == 1.0


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    d = LabeledDataset(rng.uniform(0, 1, size=(6, 2, 3)), [0, 1, 2, 0, 1, 2], 3)
    d.inputs[0, 0, 0], d.inputs[1, 0, 0] = 0.0, 1.0
    write_csv(d, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert back.inputs.shape == (6, 2, 3)
    assert np.array_equal(back.labels, d.labels)
    assert np.allclose(back.inputs, (d.inputs - d.inputs.min()) / (d.inputs.max() - d.inputs.min()))


@pytest.mark.parametrize("gz", [False, True])
def test_idx_roundtrip(tmp_path, gz):
    imgs = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4)
    write_idx(imgs, tmp_path / "x.idx")
    write_idx(np.array([3, 1], dtype=np.uint8), tmp_path / "y.idx")
    if gz:
        for n in ("x", "y"):
            (tmp_path / f"{n}.idx.gz").write_bytes(gzip.compress((tmp_path / f"{n}.idx").read_bytes()))
    sfx = ".idx.gz" if gz else ".idx"
    assert np.array_equal(read_idx(tmp_path / f"x{sfx}"), imgs)
    d = load_idx(tmp_path / f"x{sfx}", tmp_path / f"y{sfx}")
    assert d.inputs.shape == (2, 1, 4, 4) and d.labels.tolist() == [3, 1]
    arr = np.linspace(-1, 1, 6).reshape(2, 3)
    write_idx(arr, tmp_path / "f.idx")
    assert np.array_equal(read_idx(tmp_path / "f.idx"), arr)


def test_splits():
    parts = even_split(10, 3)
    assert [p.tolist() for p in parts] == [[0, 1, 2], [3, 4, 5], [6, 7, 8, 9]]
    labels = np.repeat(np.arange(4), 25)
    d = dirichlet_split(labels, 3, 0.5, np.random.default_rng(0))
    joined = np.sort(np.concatenate(d))
    assert np.array_equal(joined, np.arange(100))


def test_presets():
    assert preset_model("cnn", (1, 8, 8), 10).shapes()[-1] == (10,)
    assert preset_model("mlp", (2,), 3).layers[0].out_features == 32
    with pytest.raises(ConfigError):
        preset_model("resnet", (2,), 3)


def test_load_config_examples():
    for name in ("digits3", "blobs2"):
        cfg = load_config(CONFIGS / f"{name}.toml")
        assert cfg.scenario_id == name and cfg.h >= 2


def test_config_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"hospitals": [{"name": "A"}]}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"hospitals": [{"name": "A"}, {"name": "A"}]}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"hospitals": [{"name": "A"}, {"name": "B"}], "data": {"source": "csv", "path": "x.csv"}}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"hospitals": [{"name": "A"}, {"name": "B"}], "eval_subsample": 0}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_json_equivalent(tmp_path):
    cfg = load_config(CONFIGS / "blobs2.toml")
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p) == cfg


def test_bus_ticks_and_totals():
    bus = MessageBus()
    bus.send("a", "b", "x", b"1234")
    bus.broadcast("a", ["a", "b", "c"], "y", np.zeros(2))
    assert [m.tick for m in bus.log] == [1, 2, 3]
    assert bus.log.totals() == {"x": {"messages": 1, "bytes": 4}, "y": {"messages": 2, "bytes": 32}}
