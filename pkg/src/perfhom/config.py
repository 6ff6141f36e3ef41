"""Experiment configuration: one JSON document, validated and normalized.

Analytic data come from a small catalog instead of an expression parser::

    {"type": "constant", "value": c}
    {"type": "affine", "coeffs": [a0, a1, ..., an]}        a0 + sum a_i x_i
    {"type": "bump", "center": [...], "width": w, "amplitude": A}
    {"type": "sines", "amplitude": A, "k": [k1, ..., kn]}  A prod sin(k_i pi x_i)
    {"type": "file", "path": "u.raw"}                       field written by save_field
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import ConfigError
from .grid import GridSpec, PerforationFamily, ScalarField, load_field
from .operator import KINDS, OperatorSpec

DEFAULTS: dict = {
    "operator": {"kind": "pure", "m": 2.0, "n": 3, "nu1": None, "nu2": None, "weight": None},
    "geometry": {"omega_halfwidth": 0.5, "omega0_halfwidth": 1.5, "h": 1.0 / 32,
                 "center": None, "family": None},
    "schedule": None,
    "data": {"f": {"type": "constant", "value": 0.0}, "fj": None},
    "ladders": {"s": [1], "q": [1.0], "x": None, "r": "cell", "cells_per_radius": [2, 3]},
    "density": {"mode": "estimate", "value": None, "margin": 1.0},
    "corrector": None,
    "condition_b": None,
    "probes": {"count": 10},
    "tolerances": {"solver": 1e-8, "stabilization": 0.02},
    "output": "out",
    "seed": 0,
}

_CATALOG = ("constant", "affine", "bump", "sines", "file")


def _line_of(text: str, path: tuple) -> int:
    """Line of the last key in ``path`` found in order in the raw JSON text."""
    pos = 0
    line = 1
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if m is None:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def _merge(base, over):
    if isinstance(base, dict) and isinstance(over, dict):
        out = dict(base)
        for k, v in over.items():
            out[k] = _merge(base.get(k), v) if k in base else v
        return out
    return copy.deepcopy(over)


@dataclass
class ExperimentConfig:
    raw: dict
    text: str = ""
    source: str = "<memory>"

    # -------------------------------------------------- loading
    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config not found: {path}")
        text = path.read_text()
        return cls.from_text(text, str(path))

    @classmethod
    def from_text(cls, text: str, source: str = "<memory>") -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}:{e.lineno}: invalid JSON: {e.msg}", line=e.lineno)
        if not isinstance(data, dict):
            raise ConfigError(f"{source}:1: top level must be an object", line=1)
        cfg = cls(data, text, source)
        cfg.raw = cfg._normalize(data)
        return cfg

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls.from_text(json.dumps(data, indent=1))

    def _fail(self, path: tuple, msg: str):
        line = _line_of(self.text, path)
        where = ".".join(str(p) for p in path)
        raise ConfigError(f"{self.source}:{line}: {where}: {msg}", line=line)

    def _normalize(self, data: dict) -> dict:
        unknown = set(data) - set(DEFAULTS)
        for k in sorted(unknown):
            self._fail((k,), "unknown section")
        cfg = _merge(DEFAULTS, data)
        op = cfg["operator"]
        if op["kind"] not in KINDS:
            self._fail(("operator", "kind"), f"must be one of {', '.join(KINDS)}")
        if not isinstance(op["m"], (int, float)) or op["m"] <= 1:
            self._fail(("operator", "m"), "must be a number > 1")
        if op["kind"] == "weighted" and op["weight"] is None:
            self._fail(("operator", "weight"), "weighted kind needs a weight entry")
        geo = cfg["geometry"]
        for key in ("omega_halfwidth", "omega0_halfwidth", "h"):
            if not isinstance(geo[key], (int, float)) or geo[key] <= 0:
                self._fail(("geometry", key), "must be a positive number")
        n = int(op["n"])
        if geo["center"] is None:
            geo["center"] = [0.0] * n
        if len(geo["center"]) != n:
            self._fail(("geometry", "center"), f"needs {n} coordinates")
        try:
            self.grid_spec(cfg)
        except Exception as e:  # noqa: BLE001 - reported with the line
            self._fail(("geometry",), str(e))
        if geo["family"] is not None:
            try:
                self.family(cfg)
            except Exception as e:  # noqa: BLE001
                self._fail(("geometry", "family"), str(e))
        self._check_field(cfg["data"]["f"], ("data", "f"), n)
        if cfg["data"]["fj"] is not None:
            if not isinstance(cfg["data"]["fj"], list) or len(cfg["data"]["fj"]) != n:
                self._fail(("data", "fj"), f"needs a list of {n} catalog entries")
            for i, e in enumerate(cfg["data"]["fj"]):
                self._check_field(e, ("data", "fj", i), n)
        tol = cfg["tolerances"]
        for key, v in tol.items():
            if not isinstance(v, (int, float)) or v <= 0:
                self._fail(("tolerances", key), "must be positive")
        lad = cfg["ladders"]
        if not lad["s"] or any((not isinstance(s, int)) or s < 1 for s in lad["s"]):
            self._fail(("ladders", "s"), "needs positive integer levels")
        if lad["r"] != "cell" and (not isinstance(lad["r"], list) or
                                   any(not isinstance(r, (int, float)) or r <= 0 for r in lad["r"])):
            self._fail(("ladders", "r"), "must be \"cell\" or a list of positive radii")
        dens = cfg["density"]
        if dens["mode"] not in ("estimate", "fixed", "none"):
            self._fail(("density", "mode"), "must be estimate, fixed or none")
        if dens["mode"] == "fixed" and not isinstance(dens["value"], (int, float)):
            self._fail(("density", "value"), "fixed mode needs a numeric value")
        if cfg["schedule"] is not None:
            sch = cfg["schedule"]
            sch.setdefault("mode", "override")
            if "rho" not in sch:
                self._fail(("schedule",), "needs a rho list")
        if cfg["corrector"] is not None:
            cor = _merge({"q_mode": "data", "q": 1.0, "mollifier_h": None, "g": None,
                          "battery": 4}, cfg["corrector"])
            if cor["q_mode"] not in ("constant", "data"):
                self._fail(("corrector", "q_mode"), "must be constant or data")
            if cfg["schedule"] is None:
                self._fail(("corrector",), "needs a schedule section")
            cfg["corrector"] = cor
        if cfg["condition_b"] is not None:
            cb = _merge({"radii": "cell", "stride": "cell", "cap": None, "margin": 1.0},
                        cfg["condition_b"])
            cfg["condition_b"] = cb
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0 or cfg["seed"] >= 2 ** 64:
            self._fail(("seed",), "must be an unsigned 64-bit integer")
        return cfg

    def _check_field(self, entry, path, n):
        if not isinstance(entry, dict) or entry.get("type") not in _CATALOG:
            self._fail(path, f"catalog entry needs type in {', '.join(_CATALOG)}")
        t = entry["type"]
        need = {"constant": ("value",), "affine": ("coeffs",), "bump": ("center", "width"),
                "sines": ("k",), "file": ("path",)}[t]
        for k in need:
            if k not in entry:
                self._fail(path, f"{t} entry needs '{k}'")
        if t == "affine" and len(entry["coeffs"]) != n + 1:
            self._fail(path, f"affine coeffs need {n + 1} numbers")

    # -------------------------------------------------- builders
    @property
    def n(self) -> int:
        return int(self.raw["operator"]["n"])

    def grid_spec(self, cfg: dict | None = None) -> GridSpec:
        cfg = cfg or self.raw
        geo = cfg["geometry"]
        n = int(cfg["operator"]["n"])
        return GridSpec(n, float(geo["omega0_halfwidth"]), float(geo["omega_halfwidth"]),
                        float(geo["h"]), tuple(geo["center"] or (0.0,) * n))

    def family(self, cfg: dict | None = None) -> Optional[PerforationFamily]:
        cfg = cfg or self.raw
        fam = cfg["geometry"]["family"]
        if fam is None:
            return None
        kw = dict(fam)
        kw.setdefault("m", cfg["operator"]["m"])
        kw.setdefault("n", cfg["operator"]["n"])
        for key in ("cell_sizes", "anchor"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return PerforationFamily(**kw)

    def operator(self, strict: bool = False) -> OperatorSpec:
        op = self.raw["operator"]
        weight = None
        if op["kind"] == "weighted":
            entry = op["weight"]
            weight = lambda pts, e=entry: evaluate_entry(e, [pts[:, i] for i in range(pts.shape[1])])
        return OperatorSpec(op["kind"], float(op["m"]), int(op["n"]), op["nu1"], op["nu2"],
                            weight, strict=strict)

    def field(self, entry: dict, grid: GridSpec) -> ScalarField:
        if entry["type"] == "file":
            u = load_field(entry["path"])
            if u.grid.key != grid.key:
                raise ConfigError(f"field file {entry['path']} lives on a different grid")
            return u
        vals = evaluate_entry(entry, grid.mesh())
        return ScalarField(grid, np.broadcast_to(vals, grid.shape).copy())

    def data(self, grid: GridSpec):
        d = self.raw["data"]
        f = self.field(d["f"], grid)
        fj = [self.field(e, grid) for e in d["fj"]] if d["fj"] is not None else None
        return f, fj

    # -------------------------------------------------- identity
    def normalized_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=1)

    @property
    def hash(self) -> str:
        """Content hash; the output directory is not part of the identity."""
        ident = {k: v for k, v in self.raw.items() if k != "output"}
        return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]


def evaluate_entry(entry: dict, X) -> np.ndarray:
    """Evaluate a catalog entry on coordinate arrays X = [x1, ..., xn]."""
    t = entry["type"]
    if t == "constant":
        return np.asarray(float(entry["value"])) + 0 * X[0]
    if t == "affine":
        c = entry["coeffs"]
        return c[0] + sum(ci * x for ci, x in zip(c[1:], X)) + 0 * X[0]
    if t == "bump":
        w = float(entry["width"])
        r2 = sum((x - c) ** 2 for x, c in zip(X, entry["center"])) / w ** 2
        return float(entry.get("amplitude", 1.0)) * np.where(r2 < 1, (1 - r2) ** 2, 0.0)
    if t == "sines":
        out = float(entry.get("amplitude", 1.0))
        for k, x in zip(entry["k"], X):
            out = out * np.sin(k * math.pi * x)
        return out
    raise ConfigError(f"cannot evaluate catalog entry of type {t!r} pointwise")
