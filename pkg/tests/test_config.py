import json

import numpy as np
import pytest

from perfhom.config import ExperimentConfig, evaluate_entry
from perfhom.errors import ConfigError
from perfhom.grid import GridSpec, ScalarField, save_field


def test_defaults_normalize():
    cfg = ExperimentConfig.from_dict({})
    assert cfg.raw["operator"]["m"] == 2.0
    assert cfg.raw["geometry"]["center"] == [0.0, 0.0, 0.0]
    assert cfg.grid_spec().nodes_per_axis == 97
    assert cfg.family() is None


def test_round_trip_is_stable():
    cfg = ExperimentConfig.from_dict({"seed": 7, "ladders": {"s": [1, 2]}})
    again = ExperimentConfig.from_text(cfg.normalized_json())
    assert again.normalized_json() == cfg.normalized_json()
    assert again.hash == cfg.hash


def test_hash_ignores_output_only():
    a = ExperimentConfig.from_dict({"output": "a"})
    assert a.hash == ExperimentConfig.from_dict({"output": "b"}).hash
    assert a.hash != ExperimentConfig.from_dict({"seed": 1}).hash


@pytest.mark.parametrize("text,line,needle", [
    ('{\n "operator": {\n  "m": 0.5\n }\n}', 3, "operator.m"),
    ('{\n "bogus": 1\n}', 2, "unknown section"),
    ('{\n "seed": -1\n}', 2, "seed"),
    ('{\n "geometry": {"h": 0.4}\n}', 2, "geometry"),
    ('{\n "data": {\n  "f": {"type": "affine", "coeffs": [1, 2]}\n }\n}', 3, "coeffs"),
    ('{\n "corrector": {}\n}', 2, "schedule"),
    ('{\n "ladders": {"s": [0]}\n}', 2, "ladders.s"),
    ('{"a": 1,,}', 1, "invalid JSON"),
])
def test_errors_are_line_anchored(text, line, needle):
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_text(text, "cfg.json")
    assert e.value.line == line
    assert needle in str(e.value) and str(e.value).startswith(f"cfg.json:{line}:")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="config not found"):
        ExperimentConfig.load(tmp_path / "nope.json")


def test_catalog_entries():
    X = [np.array([0.5]), np.array([0.25]), np.array([0.0])]
    assert evaluate_entry({"type": "constant", "value": 2}, X)[0] == 2
    assert evaluate_entry({"type": "affine", "coeffs": [1, 2, 4, 0]}, X)[0] == 3
    assert evaluate_entry({"type": "sines", "k": [1, 2, 1]}, [np.array([0.5])] * 3)[0] == \
        pytest.approx(0.0)
    b = evaluate_entry({"type": "bump", "center": [0.5, 0.25, 0], "width": 0.5, "amplitude": 3}, X)
    assert b[0] == 3


def test_field_file(tmp_path):
    cfg = ExperimentConfig.from_dict({"geometry": {"h": 0.25}})
    g = cfg.grid_spec()
    u = ScalarField(g, np.arange(g.size, dtype=float).reshape(g.shape))
    path = tmp_path / "u.raw"
    save_field(u, path)
    assert np.array_equal(cfg.field({"type": "file", "path": str(path)}, g).values, u.values)
    other = GridSpec(3, 1.5, 0.5, 0.125)
    with pytest.raises(ConfigError):
        cfg.field({"type": "file", "path": str(path)}, other)


def test_weighted_operator_from_catalog():
    cfg = ExperimentConfig.from_dict({"operator": {
        "kind": "weighted", "m": 2.5, "nu1": 1.0, "nu2": 3.0,
        "weight": {"type": "affine", "coeffs": [2, 0.5, 0, 0]}}})
    op = cfg.operator()
    assert op.weight_at(np.array([[1.0, 0, 0]]))[0] == 2.5
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"operator": {"kind": "weighted"}})
