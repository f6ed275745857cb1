"""Flat ``key=value`` run configuration.

Keys are ``model.<field>``, ``model.ssm.<field>``, ``optim.<field>`` plus
``preset`` (``full`` or ``reduced``) and ``seeds`` (comma separated).
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

from .model import ModelConfig, reduced_config
from .training import OptimConfig

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def parse_kv_file(path) -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, tuple):
        parts = [p for p in raw.replace("(", "").replace(")", "").replace("[", "").replace("]", "").split(",") if p.strip()]
        return tuple(type(current[0])(ast.literal_eval(p.strip())) if current else ast.literal_eval(p.strip())
                     for p in parts)
    if current is None:
        return None if raw.lower() == "none" else int(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _apply(obj, key: str, raw: str):
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise ValueError(f"unknown config key {key!r} for {type(obj).__name__}")
    return dataclasses.replace(obj, **{key: _coerce(raw, getattr(obj, key))})


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    preset: str = "full"

    def to_kv(self) -> str:
        lines = [f"preset={self.preset}", "seeds=" + ",".join(map(str, self.seeds))]
        for f in dataclasses.fields(self.model):
            v = getattr(self.model, f.name)
            if f.name == "ssm":
                for g in dataclasses.fields(v):
                    lines.append(f"model.ssm.{g.name}={_fmt(getattr(v, g.name))}")
            else:
                lines.append(f"model.{f.name}={_fmt(v)}")
        for f in dataclasses.fields(self.optim):
            lines.append(f"optim.{f.name}={_fmt(getattr(self.optim, f.name))}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def resolve(kv: Mapping[str, str]) -> RunConfig:
    """Build a RunConfig from defaults, the preset, then every key in order."""
    preset = kv.get("preset", "full")
    if preset == "reduced":
        model = reduced_config()
    elif preset == "full":
        model = ModelConfig()
    else:
        raise ValueError(f"unknown preset {preset!r} (expected full or reduced)")
    optim = OptimConfig()
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    ssm = dataclasses.replace(model.ssm)
    for key, raw in kv.items():
        if key == "preset":
            continue
        if key == "seeds":
            seeds = tuple(int(s) for s in raw.split(",") if s.strip())
        elif key.startswith("model.ssm."):
            ssm = _apply(ssm, key[len("model.ssm."):], raw)
        elif key.startswith("model."):
            model = _apply(model, key[len("model."):], raw)
        elif key.startswith("optim."):
            optim = _apply(optim, key[len("optim."):], raw)
        else:
            raise ValueError(f"unknown config key {key!r}")
    model = dataclasses.replace(model, ssm=ssm)
    model.validate()
    optim.validate()
    return RunConfig(model, optim, seeds, preset)


def load_run_config(path=None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    kv: Dict[str, str] = parse_kv_file(path) if path else {}
    kv.update(overrides or {})
    return resolve(kv)


def seeds_list(raw: str | List[int]) -> Tuple[int, ...]:
    if isinstance(raw, str):
        return tuple(int(s) for s in raw.replace(" ", ",").split(",") if s)
    return tuple(raw)
