import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from infalign.config import SweepConfig, config_from_dict, load_config, resolve_transform
from infalign.errors import ConfigError
from infalign.fixedpoint import FixedPointFamily
from infalign.io import (
    OutputCollector,
    OutputError,
    RecordFormatError,
    config_hash,
    format_csv,
    read_records,
)
from infalign.plotting import tradeoff_svg
from infalign.transforms import ExpTilt, write_table_csv


def test_defaults():
    cfg = SweepConfig()
    betas = cfg.beta_values()
    assert len(betas) == 16
    assert betas[0] == pytest.approx(0.02) and betas[-1] == pytest.approx(5.0)
    assert np.allclose(np.diff(np.log(betas)), np.log(250) / 15)
    assert [t.label for t in cfg.resolved_transforms()] == ["identity", "log", "exp:5", "exp:10", "exp:-5",
                                                            "exp:-10"]
    d = cfg.to_dict()
    assert d["grid"] == 2001 and d["trials"] == 1_000_000 and d["beta_values"] == betas
    assert "out" not in d


def test_yaml_round_trip(tmp_path):
    path = tmp_path / "sweep.yaml"
    path.write_text("transforms: [identity, 'exp:5']\nprocedures: bon:2\nbetas: [0.5, 0.1]\n"
                    "trials: 1e4\nseed: 3\n")
    cfg = load_config(path)
    assert cfg.transforms == ("identity", "exp:5")
    assert cfg.procedures == ("bon:2",)
    assert cfg.beta_values() == [0.1, 0.5]
    assert cfg.trials == 10_000 and cfg.seed == 3


@pytest.mark.parametrize("text", [
    "betas: [0.1, -1]",
    "beta_range: [0.1, 1, 0]",
    "beta_range: [1, 0.1, 4]",
    "grid: 2000",
    "trials: 0",
    "seed: -1",
    "rewind_fallback: first",
    "colour: red",
    "transforms: []",
    "png: maybe",
    "- just\n- a list",
    "betas: [a, b]",
    "grid: [1",
])
def test_bad_configs(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_table_paths_resolve_against_config_dir(tmp_path):
    write_table_csv(tmp_path / "phi.csv", np.linspace(-1, 0, 5))
    cfg = config_from_dict({"transforms": ["table:phi.csv"]}, base_dir=str(tmp_path))
    [t] = cfg.resolved_transforms()
    assert np.allclose(t.values, np.linspace(-1, 0, 5))
    missing = config_from_dict({"transforms": ["table:other.csv"]}, base_dir=str(tmp_path))
    with pytest.raises(ConfigError):
        missing.validate_specs()


def test_families_and_bad_specs():
    assert isinstance(resolve_transform("bon_fp:4"), FixedPointFamily)
    with pytest.raises(ConfigError):
        SweepConfig(procedures=("bon:zero",)).validate_specs()
    with pytest.raises(ConfigError):
        SweepConfig(transforms=("won_fp:",)).validate_specs()


def test_read_records(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"prompt_id": "p", "response_id": "a", "reward": 1, "extra": [1]}\n\n'
                    '{"prompt_id": 7, "response_id": "b", "reward": 2.5}\n')
    rows = read_records(path)
    assert [r.reward for _, r in rows] == [1.0, 2.5]
    assert rows[0][0]["extra"] == [1]
    assert rows[1][1].prompt_id == "7"


@pytest.mark.parametrize("line, msg", [
    ("{not json", "invalid JSON"),
    ("[1, 2]", "expected an object"),
    ('{"prompt_id": "p", "reward": 1}', "missing field"),
    ('{"prompt_id": "p", "response_id": "a", "reward": "high"}', "must be a number"),
    ('{"prompt_id": "p", "response_id": "a", "reward": true}', "must be a number"),
    ('{"prompt_id": "p", "response_id": "a", "reward": NaN}', "finite"),
])
def test_read_records_errors_carry_line_numbers(tmp_path, line, msg):
    path = tmp_path / "r.jsonl"
    path.write_text('{"prompt_id": "p", "response_id": "ok", "reward": 0}\n' + line + "\n")
    with pytest.raises(RecordFormatError, match=rf":2: .*{msg}"):
        read_records(path)


def test_csv_floats_round_trip():
    x = 0.1 + 0.2
    text = format_csv(("a", "b", "c"), [(x, 3, "s")])
    assert text == f"a,b,c\n{x!r},3,s\n"
    assert float(text.splitlines()[1].split(",")[0]) == x


def test_collector_writes_manifest(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    cfg = {"b": 1, "a": [1, 2]}
    with OutputCollector(tmp_path / "o", "demo", cfg, seed=5) as out:
        out.write_text("x.csv", "1\n")
        out.write_bytes("sub/y.bin", b"\x00\x01")
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["command"] == "demo" and manifest["seed"] == 5
    assert manifest["config_hash"] == config_hash({"a": [1, 2], "b": 1})
    assert manifest["started"] == "1970-01-01T00:00:00Z"
    assert set(manifest["outputs"]) == {"x.csv", "sub/y.bin"}
    import hashlib
    assert manifest["outputs"]["x.csv"] == hashlib.sha256(b"1\n").hexdigest()


def test_collector_cleans_up_on_failure(tmp_path):
    out_dir = tmp_path / "o"
    with pytest.raises(RuntimeError):
        with OutputCollector(out_dir, "demo", {}) as out:
            out.write_text("x.csv", "1\n")
            raise RuntimeError("boom")
    assert list(out_dir.iterdir()) == []


def test_collector_rejects_double_write(tmp_path):
    with pytest.raises(OutputError):
        with OutputCollector(tmp_path, "demo", {}) as out:
            out.write_text("x", "1")
            out.write_text("x", "2")
    assert not (tmp_path / "x").exists()


def test_svg_structure():
    series = {f"t{i}": [(0.0, 0.5), (0.3 * i + 0.1, 0.6 + 0.05 * i), (1.2, 0.9)] for i in range(6)}
    svg = tradeoff_svg(series, "title & more")
    root = ET.fromstring(svg)
    ns = "{http://www.w3.org/2000/svg}"
    lines = root.findall(f".//{ns}polyline")
    assert [p.get("data-label") for p in lines] == list(series)
    # KL axis starts at zero: the first point of each curve sits on the left edge of the plot
    xs = {float(p.get("points").split()[0].split(",")[0]) for p in lines}
    assert len(xs) == 1
    labels = [t.text for t in root.iter(f"{ns}text")]
    assert "0" in labels and "0.4" in labels and "1.0" in labels
