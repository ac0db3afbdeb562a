"""Config files and CSV tables used by the command-line front end.

Config is YAML with a ``schema_version`` field; see ``README.md`` for the
full schema. CSV files are UTF-8 with a mandatory header; covariates are
``x0..x{d-1}``, the outcome ``y`` and the treatment ``t``. Floats are written
with ``repr`` so tables round-trip exactly; infinite bounds use ``inf``.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# config schema: section -> {key: (required, default)}

_REQ = object()

SCHEMA: dict[str, dict] = {
    "simulation": {
        "scenario": _REQ,
        "eta": _REQ,
        "n_train": _REQ,
        "n_test": _REQ,
        "d": 50,
        "sparsity": 10,
        "coef": 0.47,
        "tilt": {"c_in": 0.96, "c_out": 1.59, "threshold": 1.86},
    },
    "experiment": {
        "n_runs": _REQ,
        "rho_grid": _REQ,
        "methods": ["CP", "WCP", "RCP", "WRCP", "D-WRCP"],
        "divergences": ["KL"],
        "alpha": 0.1,
        "length_cap": 17.0,
    },
    "method": {
        "name": _REQ,
        "alpha": _REQ,
        "divergence": "KL",
        "rho": [0.0],
        "leave_one_out": False,
    },
    "sensitivity": {
        "t1": _REQ,
        "t2": _REQ,
        "ite": False,
        "budget_split": None,
        "propensity_clip": 0.01,
    },
}

TOP_LEVEL = {"schema_version", "seed", *SCHEMA}
SECTIONS_FOR = {
    "simulate": ("simulation",),
    "predict": ("method",),
    "sensitivity": ("method", "sensitivity"),
    "experiment": ("simulation", "experiment"),
}
_TILT_KEYS = {"c_in", "c_out", "threshold"}


def load_config(path, subcommand: str) -> dict:
    """Parse and validate a config for ``subcommand``; fills defaults."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return validate_config(raw or {}, subcommand)


def validate_config(raw: dict, subcommand: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    if "schema_version" not in raw:
        raise ConfigError("missing config key: schema_version")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {raw['schema_version']!r}; expected {SCHEMA_VERSION}")
    out = {"schema_version": SCHEMA_VERSION, "seed": int(raw.get("seed", 0))}
    for section in SECTIONS_FOR[subcommand]:
        given = raw.get(section)
        if given is None:
            raise ConfigError(f"missing config key: {section}")
        if not isinstance(given, dict):
            raise ConfigError(f"config section {section} must be a mapping")
        extra = set(given) - set(SCHEMA[section])
        if extra:
            raise ConfigError(f"unknown config key(s): {', '.join(f'{section}.{k}' for k in sorted(extra))}")
        filled = {}
        for key, default in SCHEMA[section].items():
            if key in given:
                filled[key] = given[key]
            elif default is _REQ:
                raise ConfigError(f"missing config key: {section}.{key}")
            else:
                filled[key] = default
        out[section] = filled
    if "simulation" in out:
        tilt = out["simulation"]["tilt"]
        if not isinstance(tilt, dict) or set(tilt) - _TILT_KEYS:
            raise ConfigError(f"simulation.tilt accepts only {sorted(_TILT_KEYS)}")
        out["simulation"]["tilt"] = {**SCHEMA["simulation"]["tilt"], **tilt}
    if "method" in out:
        rho = out["method"]["rho"]
        out["method"]["rho"] = [float(r) for r in (rho if isinstance(rho, list) else [rho])]
    return out


# --------------------------------------------------------------------------
# CSV


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray | None = None
    t: np.ndarray | None = None

    def columns(self) -> dict:
        cols = {f"x{j}": self.X[:, j] for j in range(self.X.shape[1])}
        if self.t is not None:
            cols["t"] = self.t.astype(int)
        if self.y is not None:
            cols["y"] = self.y
        return cols


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_atomic(path: Path, writer) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_table(path, columns: dict) -> None:
    """Write equal-length columns with a header row."""
    names = list(columns)
    lengths = {len(columns[n]) for n in names}
    if len(lengths) > 1:
        raise ValueError("columns differ in length")
    n = lengths.pop() if lengths else 0

    def body(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(n):
            w.writerow([_fmt(columns[c][i]) for c in names])

    _write_atomic(path, body)


def write_json(path, obj) -> None:
    _write_atomic(path, lambda fh: json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _parse(value: str, kind: type, path, line: int, col: str):
    try:
        if kind is bool:
            if value not in ("true", "false"):
                raise ValueError(value)
            return value == "true"
        return kind(value)
    except ValueError:
        raise DataError(f"{path}:{line}: column {col!r}: cannot parse {value!r} as {kind.__name__}") from None


def read_table(path, types: dict | None = None) -> dict:
    """Read a headered CSV into typed columns (float unless ``types`` says otherwise)."""
    types = types or {}
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}:1: missing header row") from None
        if len(set(header)) != len(header):
            raise DataError(f"{path}:1: duplicate column names")
        cols: dict[str, list] = {h: [] for h in header}
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
            for h, v in zip(header, row):
                cols[h].append(_parse(v, types.get(h, float), path, line, h))
    return {h: (np.array(v, dtype=float) if types.get(h, float) is float else np.array(v)) for h, v in cols.items()}


def read_dataset(path, need_y: bool = False, need_t: bool = False) -> Dataset:
    cols = read_table(path, {"t": int})
    xs = sorted((c for c in cols if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    if not xs:
        raise DataError(f"{path}: no covariate columns x0..x{{d-1}}")
    if xs != [f"x{j}" for j in range(len(xs))]:
        raise DataError(f"{path}: covariate columns must be x0..x{len(xs) - 1} without gaps")
    unknown = set(cols) - set(xs) - {"y", "t"}
    if unknown:
        raise DataError(f"{path}: unexpected column(s) {sorted(unknown)}")
    if need_y and "y" not in cols:
        raise DataError(f"{path}: missing outcome column 'y'")
    if need_t and "t" not in cols:
        raise DataError(f"{path}: missing treatment column 't'")
    X = np.column_stack([cols[c] for c in xs]) if cols[xs[0]].size else np.empty((0, len(xs)))
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-finite covariate values")
    t = cols.get("t")
    if t is not None and not np.all((t == 0) | (t == 1)):
        raise DataError(f"{path}: treatment column must be 0/1")
    return Dataset(X, cols.get("y"), t)


INTERVAL_TYPES = {
    "index": int,
    "method": str,
    "divergence": str,
    "fold": int,
    "is_infinite": bool,
    "estimand": str,
    "population": str,
}


@contextmanager
def output_dir(path):
    """Yield a directory to write into; a new directory appears only once complete."""
    path = Path(path)
    if path.exists():
        if not path.is_dir():
            raise DataError(f"output path {path} is not a directory")
        yield path
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
