"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment, keys are dotted
(``smoother.kernel = gaussian``). Lists are comma separated; numeric
ranges may be written ``lo:hi:step`` (inclusive). Unknown keys are an
error. :func:`dump` writes the fully resolved configuration back in the
same format.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import ConfigError


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _opt_float(s: str):
    v = s.strip().lower()
    return None if v in ("", "none", "auto", "cv") else float(v)


def _floats(s: str) -> tuple[float, ...] | None:
    s = s.strip().strip("[]")
    if s.lower() in ("", "none"):
        return None
    if s.count(":") == 2 and "," not in s:
        lo, hi, step = (float(x) for x in s.split(":"))
        if not step > 0 or hi < lo:
            raise ValueError(f"bad range {s!r}")
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return tuple(round(lo + j * step, 12) for j in range(count))
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(float(x)) for x in s.strip().strip("[]").split(",") if x.strip())


def _names(s: str) -> tuple[str, ...] | None:
    s = s.strip().strip("[]")
    if s.lower() in ("", "none", "all"):
        return None
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        v = s.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return v
    return parse


def _alpha(s: str):
    return "fit" if s.strip().lower() == "fit" else _floats(s)


def _sim_bandwidth(s: str):
    v = s.strip().lower()
    return "rule" if v == "rule" else _opt_float(v)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "estimation.method": (_choice("dr", "plugin", "supervised"), "dr"),
    "estimation.rotate": (_bool, True),
    "estimation.ci_level": (float, 0.95),
    "estimation.clip_rho_min": (float, 0.01),
    "estimation.clip_w_max": (float, 50.0),
    "estimation.seed": (int, 0),
    "estimation.grid": (str, ""),
    "estimation.degenerate": (_choice("raise", "nw"), "raise"),
    "smoother.kernel": (_choice("epanechnikov", "uniform", "gaussian"), "epanechnikov"),
    "smoother.bandwidth": (_opt_float, None),
    "smoother.bandwidth_grid": (_floats, None),
    "smoother.grid_points": (int, 20),
    "smoother.grid_lo": (float, 0.05),
    "smoother.grid_hi": (float, 1.0),
    "features.quadratic_a": (_bool, True),
    "features.interactions": (_names, None),
    "simulation.study": (_choice("rmse", "misspecification", "supervised"), "rmse"),
    "simulation.n": (_ints, (500,)),
    "simulation.alpha": (_alpha, (0.1,)),
    "simulation.M": (int, 100),
    "simulation.variant": (_choice("independent", "dependent"), "independent"),
    "simulation.estimators": (_names, ("plugin", "dr")),
    "simulation.misspecify_outcome": (_bool, False),
    "simulation.seed": (int, 0),
    "simulation.a_star": (float, 1.0),
    "simulation.bandwidth": (_sim_bandwidth, None),
    "simulation.label_prob": (float, 0.5),
    "simulation.surrogate_scale": (float, 1.0),
}


def parse_value(key: str, raw: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    try:
        return SCHEMA[key][0](raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_lines(lines, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (t.strip() for t in text.split("=", 1))
        try:
            out[key] = parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_lines(text.splitlines(), str(path))


def resolve(*layers: dict[str, Any]) -> dict[str, Any]:
    """Defaults overlaid by each layer in turn (later layers win)."""
    out = {k: default for k, (_, default) in SCHEMA.items()}
    for layer in layers:
        for k, v in layer.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown configuration key {k!r}")
            out[k] = v
    return out


def _render(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list, np.ndarray)):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump(cfg: dict[str, Any], path: str | Path, header: str = "") -> None:
    lines = [f"# {line}" for line in header.splitlines()] if header else []
    lines += [f"{k} = {_render(cfg[k])}" for k in sorted(cfg)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
