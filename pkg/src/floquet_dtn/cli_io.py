"""Configuration files, subcommand dispatch and result serialization.

Usage::

    floquet-dtn <modes|dtn|solve|bands|scan|validate> --config run.yaml [--out DIR]
                [--allow-limit-fallback] [--threads N]

``FLOQUET_DTN_THREADS`` caps the worker count. Exit status is 0 on success,
2 when the run finished with warnings and 1 on errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import __version__
from .band_spectra import band_edges, check_interlacing, range_check
from .cell_solver import CellMedium, build_mesh, solve_cell, wavenumber_scan
from .dtn_ops import (
    boundedness_report,
    classical_dtn,
    default_truncation,
    rayleigh_betas,
    smallest_split_index,
    substrate_dtn,
)
from .errors import (
    AssumptionAViolated,
    FloquetDtNError,
    NearZeroDenominator,
    ParseError,
    ValidationError,
)
from .floquet_modes import CaseCRule, CaseTag, Direction, build_modes
from .profiles import TWO_PI, ProfileKind, RefractiveProfile

SCHEMA_VERSION = 1
THREADS_ENV = "FLOQUET_DTN_THREADS"
ZERO_SHIFT = 1e-3
COMMANDS = ("modes", "dtn", "solve", "bands", "scan", "validate")

_KEYS = {
    "problem": {"k", "theta_degrees", "p", "b", "d"},
    "substrate": {"kind", "value", "mean", "amplitude", "breakpoints", "values", "samples"},
    "cell": {"kind", "value", "interfaces", "values", "samples"},
    "numerics": {
        "N", "nx", "ny", "tol_integrate", "eps_eta", "tol_root", "tol_zero",
        "bottom_map", "case_c_rule",
    },
    "bands": {"lambda_max", "lambda_min", "grid_density", "weight", "shift"},
    "scan": {"k_values", "k_min", "k_max", "k_count"},
    "output": {"dir", "formats"},
}


# -- config ----------------------------------------------------------------------

def _line_map(text: str) -> dict[tuple, int]:
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key, val in node.value:
                sub = path + (key.value,)
                lines[sub] = key.start_mark.line + 1
                walk(val, sub)

    try:
        walk(yaml.compose(text, Loader=yaml.SafeLoader), ())
    except yaml.YAMLError:
        pass
    return lines


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; ``data`` is the normalized echo with defaults applied."""

    data: dict
    substrate: RefractiveProfile
    cell: CellMedium
    source: Optional[str] = None

    @property
    def k(self) -> float:
        return self.data["problem"]["k"]

    @property
    def theta(self) -> float:
        return math.radians(self.data["problem"]["theta_degrees"])

    @property
    def p(self) -> float:
        return self.data["problem"]["p"]

    @property
    def b(self) -> float:
        return self.data["problem"]["b"]

    @property
    def d(self) -> float:
        return self.data["problem"]["d"]

    @property
    def numerics(self) -> dict:
        return self.data["numerics"]

    @property
    def N(self) -> int:
        return self.numerics["N"]

    def config_hash(self) -> str:
        return config_hash(self.data)


def config_hash(data: dict) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


class _Checker:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, path: tuple, message: str):
        field_name = ".".join(path)
        line = None
        for cut in range(len(path), 0, -1):
            if path[:cut] in self.lines:
                line = self.lines[path[:cut]]
                break
        raise ValidationError(field_name, message, line)

    def number(self, block, path, key, default=None, *, positive=False, integer=False):
        if key not in block:
            if default is None:
                self.fail(path + (key,), "is required")
            return default
        val = block[key]
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.fail(path + (key,), f"must be a number, got {val!r}")
        if integer and (not float(val).is_integer()):
            self.fail(path + (key,), "must be an integer")
        if not math.isfinite(val):
            self.fail(path + (key,), "must be finite")
        if positive and not val > 0:
            self.fail(path + (key,), "must be positive")
        return int(val) if integer else float(val)

    def block(self, raw, name):
        blk = raw.get(name, {})
        if blk is None:
            blk = {}
        if not isinstance(blk, dict):
            self.fail((name,), "must be a mapping")
        for key in blk:
            if key not in _KEYS[name]:
                self.fail((name, str(key)), "unknown key")
        return blk


def _complex(val, chk, path):
    if isinstance(val, (list, tuple)) and len(val) == 2:
        return complex(float(val[0]), float(val[1]))
    if isinstance(val, (int, float)) and not isinstance(val, bool):
        return complex(val)
    chk.fail(path, f"expected a number or [re, im], got {val!r}")


def _unchecked_profile(data: dict) -> RefractiveProfile:
    """Profile from its dict form without the positivity check (used for shifts)."""
    kind = ProfileKind(data["kind"])
    vals = {
        ProfileKind.CONSTANT: lambda: (data["value"],),
        ProfileKind.COSINE: lambda: (data["mean"], data["amplitude"]),
        ProfileKind.PIECEWISE: lambda: tuple(data["values"]),
        ProfileKind.TABULATED: lambda: tuple(data["samples"]),
    }[kind]()
    return RefractiveProfile(kind, tuple(float(v) for v in vals), tuple(data.get("breakpoints", ())))


def _profile_data(blk, chk, path, *, positive=True):
    kind = blk.get("kind", "constant")
    try:
        kind = ProfileKind(kind)
    except ValueError:
        chk.fail(path + ("kind",), f"unknown profile kind {kind!r}")
    allowed = {
        ProfileKind.CONSTANT: {"kind", "value"},
        ProfileKind.COSINE: {"kind", "mean", "amplitude"},
        ProfileKind.PIECEWISE: {"kind", "breakpoints", "values"},
        ProfileKind.TABULATED: {"kind", "samples"},
    }[kind]
    for key in blk:
        if key not in allowed:
            chk.fail(path + (key,), f"not a parameter of a {kind.value} profile")
    data = {"kind": kind.value}
    if kind is ProfileKind.CONSTANT:
        data["value"] = chk.number(blk, path, "value")
    elif kind is ProfileKind.COSINE:
        data["mean"] = chk.number(blk, path, "mean")
        data["amplitude"] = chk.number(blk, path, "amplitude", 0.0)
    elif kind is ProfileKind.PIECEWISE:
        data["breakpoints"] = [float(v) for v in blk.get("breakpoints", [])]
        data["values"] = [float(v) for v in blk.get("values", [])]
    else:
        data["samples"] = [float(v) for v in blk.get("samples", [])]
    try:
        if positive:
            prof = RefractiveProfile.from_dict(data)
        else:
            prof = _unchecked_profile(data)
    except ValidationError as exc:
        chk.fail(path, str(exc).split(": ", 1)[-1])
    return data, prof


def validate_config(raw: Any, lines: Optional[dict] = None, source: Optional[str] = None) -> RunConfig:
    """Apply defaults, reject unknown keys and check every downstream precondition."""
    chk = _Checker(lines or {})
    if not isinstance(raw, dict):
        raise ParseError("configuration must be a mapping at the top level", 1, 1)
    for key in raw:
        if key not in _KEYS:
            chk.fail((str(key),), "unknown section")
    prob = chk.block(raw, "problem")
    k = chk.number(prob, ("problem",), "k", positive=True)
    theta_deg = chk.number(prob, ("problem",), "theta_degrees", 0.0)
    if not -90.0 < theta_deg < 90.0:
        chk.fail(("problem", "theta_degrees"), "theta ∈ (−90, 90) required")
    p = chk.number(prob, ("problem",), "p", TWO_PI, positive=True)
    b = chk.number(prob, ("problem",), "b", 0.0)
    d = chk.number(prob, ("problem",), "d", 1.0)
    if not d > b:
        chk.fail(("problem", "d"), "need d > b")
    problem = {"k": k, "theta_degrees": theta_deg, "p": p, "b": b, "d": d}

    sub_blk = chk.block(raw, "substrate")
    if "substrate" not in raw:
        chk.fail(("substrate",), "is required")
    sub_data, substrate = _profile_data(sub_blk, chk, ("substrate",))

    cell_blk = chk.block(raw, "cell")
    ckind = cell_blk.get("kind", "uniform")
    if ckind == "uniform":
        for key in cell_blk:
            if key not in ("kind", "value"):
                chk.fail(("cell", key), "not a parameter of a uniform cell")
        val = _complex(cell_blk.get("value", 1.0), chk, ("cell", "value"))
        cell = CellMedium.uniform(val)
        cell_data = {"kind": "uniform", "value": [val.real, val.imag]}
    elif ckind == "layered":
        for key in cell_blk:
            if key not in ("kind", "interfaces", "values"):
                chk.fail(("cell", key), "not a parameter of a layered cell")
        interfaces = [float(t) for t in cell_blk.get("interfaces", [])]
        values = [_complex(v, chk, ("cell", "values")) for v in cell_blk.get("values", [])]
        try:
            cell = CellMedium.layered(interfaces, values)
        except ValidationError as exc:
            chk.fail(("cell",), str(exc).split(": ", 1)[-1])
        cell_data = {"kind": "layered", "interfaces": interfaces, "values": [[v.real, v.imag] for v in values]}
    elif ckind in ("table", "expression-table"):
        for key in cell_blk:
            if key not in ("kind", "samples"):
                chk.fail(("cell", key), "not a parameter of a table cell")
        rows = cell_blk.get("samples")
        if not isinstance(rows, list) or not rows or not all(isinstance(r, list) and r for r in rows):
            chk.fail(("cell", "samples"), "must be a non-empty list of rows")
        if len({len(r) for r in rows}) != 1:
            chk.fail(("cell", "samples"), "rows must have equal length")
        table = [[_complex(v, chk, ("cell", "samples")) for v in r] for r in rows]
        try:
            cell = CellMedium.table(table, p, b, d)
        except ValidationError as exc:
            chk.fail(("cell", "samples"), str(exc).split(": ", 1)[-1])
        cell_data = {"kind": "table", "samples": [[[v.real, v.imag] for v in r] for r in table]}
    else:
        chk.fail(("cell", "kind"), f"unknown cell kind {ckind!r}")

    num = chk.block(raw, "numerics")
    N = chk.number(num, ("numerics",), "N", default_truncation(k, p), integer=True)
    if N < 0:
        chk.fail(("numerics", "N"), "must be non-negative")
    nx = chk.number(num, ("numerics",), "nx", 64, integer=True)
    ny = chk.number(num, ("numerics",), "ny", 64, integer=True)
    if nx < 4 or ny < 4:
        chk.fail(("numerics", "nx" if nx < 4 else "ny"), "mesh resolution must be at least 4")
    tol_int = chk.number(num, ("numerics",), "tol_integrate", 1e-11, positive=True)
    if not 1e-14 < tol_int < 1e-4:
        chk.fail(("numerics", "tol_integrate"), "must lie in (1e-14, 1e-4)")
    eps_eta = chk.number(num, ("numerics",), "eps_eta", 1e-9, positive=True)
    tol_root = chk.number(num, ("numerics",), "tol_root", 1e-12, positive=True)
    tol_zero = chk.number(num, ("numerics",), "tol_zero", 1e-10, positive=True)
    bottom_map = num.get("bottom_map", "auto")
    if bottom_map not in ("auto", "floquet", "rayleigh"):
        chk.fail(("numerics", "bottom_map"), "must be auto, floquet or rayleigh")
    if bottom_map == "rayleigh" and substrate.kind is not ProfileKind.CONSTANT:
        chk.fail(("numerics", "bottom_map"), "rayleigh needs a constant substrate")
    rule = num.get("case_c_rule", "flux")
    if rule not in ("flux", "exponent"):
        chk.fail(("numerics", "case_c_rule"), "must be flux or exponent")
    numerics = {
        "N": N, "nx": nx, "ny": ny, "tol_integrate": tol_int, "eps_eta": eps_eta,
        "tol_root": tol_root, "tol_zero": tol_zero, "bottom_map": bottom_map, "case_c_rule": rule,
    }

    bnd = chk.block(raw, "bands")
    bands = {
        "lambda_max": chk.number(bnd, ("bands",), "lambda_max", 4.5),
        "grid_density": chk.number(bnd, ("bands",), "grid_density", 64.0, positive=True),
    }
    if "lambda_min" in bnd:
        bands["lambda_min"] = chk.number(bnd, ("bands",), "lambda_min")
        if not bands["lambda_max"] > bands["lambda_min"]:
            chk.fail(("bands", "lambda_max"), "must exceed lambda_min")
    for key, positive in (("weight", True), ("shift", False)):
        if key in bnd:
            spec = bnd[key]
            if isinstance(spec, (int, float)) and not isinstance(spec, bool):
                spec = {"kind": "constant", "value": spec}
            if not isinstance(spec, dict):
                chk.fail(("bands", key), "must be a number or a profile mapping")
            bands[key], _ = _profile_data(spec, chk, ("bands", key), positive=positive)

    scn = chk.block(raw, "scan")
    if "k_values" in scn:
        ks = scn["k_values"]
        if not isinstance(ks, list) or not ks:
            chk.fail(("scan", "k_values"), "must be a non-empty list")
        for v in ks:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not (v > 0 and math.isfinite(v)):
                chk.fail(("scan", "k_values"), "entries must be positive and finite")
        k_values = [float(v) for v in ks]
    else:
        k_min = chk.number(scn, ("scan",), "k_min", 0.3, positive=True)
        k_max = chk.number(scn, ("scan",), "k_max", 2.1, positive=True)
        count = chk.number(scn, ("scan",), "k_count", 10, integer=True)
        if count < 1 or k_max < k_min:
            chk.fail(("scan",), "need k_count >= 1 and k_max >= k_min")
        k_values = np.linspace(k_min, k_max, count).tolist()
    scan = {"k_values": k_values}

    out = chk.block(raw, "output")
    output = {"dir": str(out.get("dir", "out")), "formats": list(out.get("formats", ["json", "csv"]))}
    for fmt in output["formats"]:
        if fmt not in ("json", "csv"):
            chk.fail(("output", "formats"), f"unknown format {fmt!r}")

    data = {
        "problem": problem,
        "substrate": sub_data,
        "cell": cell_data,
        "numerics": numerics,
        "bands": bands,
        "scan": scan,
        "output": output,
    }
    return RunConfig(data, substrate, cell, source)


def load_config_text(text: str, source: Optional[str] = None) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        col = mark.column + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ParseError(f"malformed configuration: {problem}", line, col) from exc
    if raw is None:
        raise ParseError("configuration is empty", 1, 1)
    return validate_config(raw, _line_map(text), source)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    return load_config_text(text, str(path))


def default_config() -> RunConfig:
    text = resources.files("floquet_dtn").joinpath("default_config.yaml").read_text()
    return load_config_text(text, "default_config.yaml")


# -- envelope ----------------------------------------------------------------------

@dataclass
class ResultEnvelope:
    command: str
    config: dict
    payload: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    schema: int = SCHEMA_VERSION
    version: str = __version__

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def warn(self, message: str) -> None:
        if message not in self.warnings:
            self.warnings.append(message)

    def to_dict(self, *, include_timing: bool = True) -> dict:
        out = {
            "schema": self.schema,
            "version": self.version,
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "warnings": list(self.warnings),
            "payload": self.payload,
        }
        if include_timing:
            out["timing"] = self.timing
        return out

    def to_json(self, *, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing=include_timing), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> ResultEnvelope:
        if data.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported envelope schema {data.get('schema')!r}")
        env = cls(
            command=data["command"],
            config=data["config"],
            payload=data["payload"],
            warnings=list(data["warnings"]),
            timing=data.get("timing", {}),
            schema=data["schema"],
            version=data["version"],
        )
        if env.config_hash != data["config_hash"]:
            raise ValueError("config hash does not match the embedded config")
        return env

    @property
    def exit_code(self) -> int:
        return 2 if self.warnings else 0


def _pair(z) -> list:
    z = complex(z)
    return [z.real, z.imag]


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


def thread_cap(explicit: Optional[int] = None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


# -- runners ---------------------------------------------------------------------

def _mode_kwargs(cfg: RunConfig) -> dict:
    num = cfg.numerics
    return {
        "tol": num["tol_integrate"],
        "eps_eta": num["eps_eta"],
        "case_c_rule": CaseCRule(num["case_c_rule"]),
    }


def _bottom_operator(cfg: RunConfig, env: ResultEnvelope, b: float, threads: int, allow_fallback: bool):
    """Substrate map at b; a vanishing mode value moves b down by ZERO_SHIFT (warned)."""
    num = cfg.numerics
    kwargs = {}
    if num["bottom_map"] != "rayleigh" and not (num["bottom_map"] == "auto" and cfg.substrate.kind is ProfileKind.CONSTANT):
        kwargs = dict(_mode_kwargs(cfg), tol_zero=num["tol_zero"], allow_limit_fallback=allow_fallback, threads=threads)
    for attempt in range(5):
        try:
            op = substrate_dtn(cfg.substrate, cfg.k, cfg.theta, cfg.p, b, cfg.N, method=num["bottom_map"], **kwargs)
            break
        except NearZeroDenominator as exc:
            env.warn(f"mode n={exc.n} vanishes at x2={exc.x2:.12g}; bottom boundary moved to x2={b - ZERO_SHIFT:.12g}")
            b -= ZERO_SHIFT
    else:
        raise NearZeroDenominator(None, b, "bottom boundary could not be moved off a mode zero")
    for n in op.zero_flags:
        env.warn(f"mode n={n} vanishes at x2={b:.12g}; coefficient taken just above the boundary")
    for w in op.diagnostics.get("warnings", []):
        env.warn(w)
    return op, b


def run_modes(cfg: RunConfig, *, threads: int = 1, allow_limit_fallback: bool = False) -> ResultEnvelope:
    env = ResultEnvelope("modes", cfg.data)
    num = cfg.numerics
    modes = build_modes(cfg.substrate, cfg.k, cfg.theta, cfg.p, (-cfg.N, cfg.N), threads=threads, **_mode_kwargs(cfg))
    records = []
    for m in modes:
        for w in m.warnings:
            env.warn(w)
        rec = {
            "n": m.n,
            "alpha_n": m.alpha_n,
            "eta": m.eta,
            "case": m.case.value,
            "lambda1": _pair(m.lambda1),
            "lambda2": _pair(m.lambda2),
            "mu1": _pair(m.mu1),
            "mu2": _pair(m.mu2),
            "log_abs_lambda1": m.log_abs_lambda1,
            "dtn_down": None,
            "dtn_up": None,
        }
        if m.case.is_vector:
            env.warn(f"mode n={m.n} has W = +-I (case {m.case.value}); DtN coefficients undefined")
        else:
            for key, direction, x2 in (("dtn_down", Direction.DOWNWARD, cfg.b), ("dtn_up", Direction.UPWARD, cfg.d)):
                try:
                    r = m.log_derivative(direction, x2, num["tol_zero"])
                    rec[key] = _pair(-r if direction is Direction.DOWNWARD else r)
                except NearZeroDenominator:
                    env.warn(f"mode n={m.n} vanishes at x2={x2:.12g}")
        records.append(rec)
    env.payload = {"modes": records}
    return env


def run_dtn(cfg: RunConfig, *, threads: int = 1, allow_limit_fallback: bool = False) -> ResultEnvelope:
    env = ResultEnvelope("dtn", cfg.data)
    top = classical_dtn(cfg.k, cfg.theta, cfg.p, cfg.N, height=cfg.d)
    try:
        bottom, b = _bottom_operator(cfg, env, cfg.b, threads, allow_limit_fallback)
    except AssumptionAViolated as exc:
        env.warn(str(exc))
        env.payload = {"top": top.to_dict(), "bottom": None, "assumption_a_violations": exc.indices}
        return env
    env.payload = {
        "top": top.to_dict(),
        "bottom": bottom.to_dict(),
        "bottom_boundedness": boundedness_report(bottom).to_dict(),
        "smallest_split_index": smallest_split_index(bottom),
    }
    return env


def run_solve(cfg: RunConfig, *, threads: int = 1, allow_limit_fallback: bool = False):
    """Returns the envelope and the ScatteringSolution."""
    env = ResultEnvelope("solve", cfg.data)
    num = cfg.numerics
    bottom, b = _bottom_operator(cfg, env, cfg.b, threads, allow_limit_fallback)
    medium = cfg.cell if b == cfg.b else CellMedium.over_substrate(cfg.cell, cfg.substrate, cfg.b)
    mesh = build_mesh(cfg.p, b, cfg.d, num["nx"], num["ny"])
    medium.validate(mesh)
    top = classical_dtn(cfg.k, cfg.theta, cfg.p, cfg.N, height=cfg.d)
    sol = solve_cell(mesh, medium, cfg.k, cfg.theta, top, bottom)
    env.payload = sol.summary()
    env.payload["b_used"] = b
    return env, sol


def run_bands(cfg: RunConfig, *, threads: int = 1, allow_limit_fallback: bool = False):
    env = ResultEnvelope("bands", cfg.data)
    bc = cfg.data["bands"]
    if "weight" in bc:
        weight = RefractiveProfile.from_dict(bc["weight"])
    else:
        weight = cfg.substrate.shifted(-math.sin(cfg.theta) ** 2)
    shift = _unchecked_profile(bc["shift"]) if "shift" in bc else 0.0
    edges = band_edges(
        weight, shift, bc["lambda_max"], bc["grid_density"], cfg.numerics["tol_root"],
        lambda_min=bc.get("lambda_min"),
    )
    problems = edges.interlacing() + range_check(weight, shift, edges)
    for msg in problems:
        env.warn(msg)
    env.payload = {**edges.to_dict(), "interlacing_ok": not problems}
    return env, edges


def run_scan(cfg: RunConfig, *, threads: int = 1, allow_limit_fallback: bool = False):
    env = ResultEnvelope("scan", cfg.data)
    num = cfg.numerics
    mesh = build_mesh(cfg.p, cfg.b, cfg.d, num["nx"], num["ny"])
    cfg.cell.validate(mesh)
    kwargs = {}
    if num["bottom_map"] == "floquet" or (num["bottom_map"] == "auto" and cfg.substrate.kind is not ProfileKind.CONSTANT):
        kwargs = dict(_mode_kwargs(cfg), tol_zero=num["tol_zero"], allow_limit_fallback=allow_limit_fallback, threads=threads)
    rows = wavenumber_scan(
        mesh, cfg.cell, cfg.substrate, cfg.theta, cfg.data["scan"]["k_values"],
        N=cfg.data["numerics"]["N"], bottom_map=num["bottom_map"], **kwargs,
    )
    for r in rows:
        if not r.solvable:
            env.warn(f"k={r.k:.12g}: {r.message}")
    env.payload = {
        "rows": [
            {
                "k": r.k,
                "condition_estimate": _finite_or_none(r.condition_estimate),
                "energy_residual": _finite_or_none(r.energy_residual),
                "solvable": r.solvable,
                "spike": r.spike,
                "message": r.message,
            }
            for r in rows
        ]
    }
    return env, rows


def _check(name, value, threshold, passed):
    return {"name": name, "value": float(value), "threshold": float(threshold), "passed": bool(passed)}


def run_validate(cfg: RunConfig, *, threads: int = 1, allow_limit_fallback: bool = False) -> ResultEnvelope:
    """Closed-form checks: homogeneous modes and maps, Fresnel reflection, constant-coefficient bands."""
    env = ResultEnvelope("validate", cfg.data)
    checks = []
    one = RefractiveProfile.constant(1.0)
    eta_err = dtn_err = 0.0
    tags_ok = True
    for k in (0.25, 0.5, 1.0, 2.0):
        for theta in (0.0, math.pi / 6, -math.pi / 6, math.pi / 3, -math.pi / 3):
            betas = rayleigh_betas(k, theta, TWO_PI, 8)
            modes = build_modes(one, k, theta, TWO_PI, (-8, 8), threads=threads)
            for m, beta in zip(modes, betas):
                exact = 2 * math.cos(TWO_PI * beta.real) if beta.imag == 0 else 2 * math.cosh(TWO_PI * beta.imag)
                eta_err = max(eta_err, abs(m.eta - exact) / max(1.0, abs(exact)))
                if beta.imag > 0:
                    tags_ok &= m.case is CaseTag.A
                elif beta.real == 0:
                    tags_ok &= m.case in (CaseTag.D_II, CaseTag.D_I)
                else:
                    tags_ok &= m.case in (CaseTag.C, CaseTag.D_I, CaseTag.E_I)
                if not m.case.is_vector:
                    for direction, x2 in ((Direction.DOWNWARD, 0.3), (Direction.UPWARD, 0.7)):
                        r = m.log_derivative(direction, x2)
                        c = -r if direction is Direction.DOWNWARD else r
                        dtn_err = max(dtn_err, abs(c - 1j * beta) / max(1.0, abs(beta)))
    checks.append(_check("homogeneous_eta", eta_err, 1e-8, eta_err <= 1e-8))
    checks.append(_check("homogeneous_case_tags", 0.0 if tags_ok else 1.0, 0.0, tags_ok))
    checks.append(_check("homogeneous_dtn", dtn_err, 1e-8, dtn_err <= 1e-8))

    c = 1.5
    k = 0.9
    mesh = build_mesh(TWO_PI, 0.0, 1.0, 64, 64)
    top = classical_dtn(k, 0.0, TWO_PI, 18, height=1.0)
    bottom = substrate_dtn(RefractiveProfile.constant(c * c), k, 0.0, TWO_PI, 0.0, 18, method="floquet", threads=threads)
    sol = solve_cell(mesh, CellMedium.uniform(c * c), k, 0.0, top, bottom, estimate_condition=False)
    fresnel = ((1 - c) / (1 + c)) ** 2
    checks.append(_check("fresnel_reflection", abs(sol.efficiencies[0] - fresnel), 5e-3,
                         abs(sol.efficiencies[0] - fresnel) <= 5e-3))
    checks.append(_check("fresnel_energy_residual", sol.energy_residual, 5e-3, sol.energy_residual <= 5e-3))

    edges = band_edges(1.0, 0.0, 4.5)
    want_l = np.array([0.0, 1.0, 1.0, 4.0, 4.0])
    want_m = np.array([0.25, 0.25, 2.25, 2.25])
    ok = len(edges.lambda_edges) == 5 and len(edges.mu_edges) == 4
    err = float(max(np.max(np.abs(edges.lambda_edges - want_l)), np.max(np.abs(edges.mu_edges - want_m)))) if ok else float("inf")
    checks.append(_check("constant_band_edges", err, 1e-7, ok and err <= 1e-7))
    inter = not check_interlacing(edges.lambda_edges, edges.mu_edges)
    checks.append(_check("constant_band_interlacing", 0.0 if inter else 1.0, 0.0, inter))

    env.payload = {"checks": checks, "passed": all(ch["passed"] for ch in checks)}
    return env


RUNNERS = {
    "modes": run_modes,
    "dtn": run_dtn,
    "solve": run_solve,
    "bands": run_bands,
    "scan": run_scan,
    "validate": run_validate,
}


# -- output ----------------------------------------------------------------------

def _write_json(path: Path, text: str) -> None:
    path.write_text(text + "\n")


def write_outputs(command: str, env: ResultEnvelope, extra, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    fmts = env.config.get("output", {}).get("formats", ["json", "csv"])
    if "json" in fmts:
        name = {"modes": "modes.json", "dtn": "dtn.json"}.get(command, "summary.json")
        path = out_dir / name
        _write_json(path, env.to_json())
        written.append(path)
    if "csv" in fmts:
        if command == "solve":
            path = out_dir / "solution.csv"
            sol = extra
            u = sol.nodal_field()
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["x1", "x2", "re_u", "im_u"])
                for (x1, x2), z in zip(sol.mesh.nodes, u):
                    w.writerow([repr(float(x1)), repr(float(x2)), repr(float(z.real)), repr(float(z.imag))])
            written.append(path)
        elif command == "bands":
            path = out_dir / "bands.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["lambda", "eta"])
                for lam, eta in zip(extra.samples, extra.eta):
                    w.writerow([repr(float(lam)), repr(float(eta))])
            written.append(path)
        elif command == "scan":
            path = out_dir / "scan.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["k", "condition_estimate", "energy_residual", "solvable", "spike"])
                for r in extra:
                    w.writerow([repr(r.k), repr(r.condition_estimate), repr(r.energy_residual), int(r.solvable), int(r.spike)])
            written.append(path)
    return written


def execute(command: str, cfg: RunConfig, out_dir: Optional[Path] = None, *, threads: int = 1,
            allow_limit_fallback: bool = False) -> ResultEnvelope:
    start = time.perf_counter()
    result = RUNNERS[command](cfg, threads=threads, allow_limit_fallback=allow_limit_fallback)
    env, extra = result if isinstance(result, tuple) else (result, None)
    env.timing = {"seconds": time.perf_counter() - start, "threads": threads}
    if out_dir is not None:
        write_outputs(command, env, extra, out_dir)
    return env


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floquet-dtn", description="Floquet modes, DtN maps and grating scattering.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "validate",
                       help="YAML run configuration" + (" (default: packaged config)" if name == "validate" else ""))
        p.add_argument("--out", type=Path, default=None, help="output directory (default: output.dir of the config)")
        p.add_argument("--allow-limit-fallback", action="store_true",
                       help="evaluate vanishing modes just off the boundary instead of moving the boundary")
        p.add_argument("--threads", type=int, default=None, help=f"worker cap (overrides {THREADS_ENV})")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors map to the generic error status, --help and --version to 0
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = parse_config(args.config) if args.config is not None else default_config()
        out_dir = args.out if args.out is not None else Path(cfg.data["output"]["dir"])
        env = execute(args.command, cfg, out_dir, threads=thread_cap(args.threads),
                      allow_limit_fallback=args.allow_limit_fallback)
    except (FloquetDtNError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for w in env.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.command == "validate":
        for ch in env.payload["checks"]:
            print(f"{'PASS' if ch['passed'] else 'FAIL'} {ch['name']}: {ch['value']:.3e} (threshold {ch['threshold']:.1e})")
        if not env.payload["passed"]:
            return 1
    print(f"{args.command}: done, outputs in {out_dir}")
    return env.exit_code


if __name__ == "__main__":
    sys.exit(main())
