"""Run configuration: one JSON document, unknown keys rejected.

::

    {"seed": 0,
     "grid": {"h": 16, "w": 16, "channels": 1},
     "prompts": {"global_tokens": [...],
                 "textual": [{"tokens": [...], "bbox": [x1, y1, x2, y2]}, ...]},
     "schedule": {"T": 24, "T_init": 2, "T_focus": 3, "T_expn": 2,
                  "alpha": 0.7, "guidance": 5.0},
     "masks": {"focus_drop": []},
     "model": {"checkpoint": "random:0"},
     "outputs": {"dir": "out", "snapshot_stages": []}}

``masks`` is optional. A relative checkpoint path resolves against the config
file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .layout import BBox, TokenLayout, build_token_layout
from .masks import PARTIAL_MASKS
from .pipeline import STAGES, Schedule, make_schedule


class ConfigError(ValueError):
    """Config could not be parsed into the expected shape (CLI exit code 1)."""


def _strict(d: Any, where: str, required: set[str], optional: set[str] = frozenset()) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - required - set(optional)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")
    return d


def _int(v, where) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}: expected an integer, got {v!r}")
    return v


def _num(v, where) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    return float(v)


def _int_list(v, where) -> list[int]:
    if not isinstance(v, list):
        raise ConfigError(f"{where}: expected a list, got {v!r}")
    return [_int(x, f"{where}[{i}]") for i, x in enumerate(v)]


def _str_list(v, where) -> list[str]:
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise ConfigError(f"{where}: expected a list of strings, got {v!r}")
    return list(v)


@dataclass
class GridConfig:
    h: int = 16
    w: int = 16
    channels: int = 1


@dataclass
class TextualPrompt:
    tokens: list[int]
    bbox: list[float]


@dataclass
class PromptsConfig:
    global_tokens: list[int]
    textual: list[TextualPrompt]


@dataclass
class ScheduleConfig:
    T: int = 24
    T_init: int = 2
    T_focus: int = 3
    T_expn: int = 2
    alpha: float = 0.7
    guidance: float = 5.0

    def build(self) -> Schedule:
        return make_schedule(self.T, self.T_init, self.T_focus, self.T_expn, self.alpha, self.guidance)


@dataclass
class ModelRef:
    checkpoint: str = "random:0"


@dataclass
class OutputsConfig:
    dir: str = "out"
    snapshot_stages: list[str] = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int
    grid: GridConfig
    prompts: PromptsConfig
    schedule: ScheduleConfig
    model: ModelRef
    outputs: OutputsConfig
    focus_drop: list[str] = field(default_factory=list)
    base_dir: Optional[Path] = field(default=None, compare=False)

    def layout(self) -> TokenLayout:
        lengths = [len(tp.tokens) for tp in self.prompts.textual] + [len(self.prompts.global_tokens)]
        boxes = [BBox.from_list(tp.bbox) for tp in self.prompts.textual]
        return build_token_layout(lengths, boxes, self.grid.h, self.grid.w)

    def checkpoint_path(self) -> Optional[Path]:
        ref = self.model.checkpoint
        if ref.startswith("random:"):
            return None
        p = Path(ref)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def output_dir(self) -> Path:
        p = Path(self.outputs.dir)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "grid": {"h": self.grid.h, "w": self.grid.w, "channels": self.grid.channels},
            "prompts": {
                "global_tokens": list(self.prompts.global_tokens),
                "textual": [{"tokens": list(tp.tokens), "bbox": list(tp.bbox)} for tp in self.prompts.textual],
            },
            "schedule": {f.name: getattr(self.schedule, f.name) for f in fields(ScheduleConfig)},
            "model": {"checkpoint": self.model.checkpoint},
            "outputs": {"dir": self.outputs.dir, "snapshot_stages": list(self.outputs.snapshot_stages)},
        }
        if self.focus_drop:
            d["masks"] = {"focus_drop": list(self.focus_drop)}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def parse_config(doc: Any, base_dir: Optional[Path] = None) -> RunConfig:
    """Build a :class:`RunConfig` from a decoded JSON document.

    Only shape and type problems raise :class:`ConfigError`; semantic checks
    (overlap, schedule overflow) happen when the layout and schedule are built.
    """
    _strict(doc, "config", {"seed", "grid", "prompts", "schedule", "model", "outputs"}, {"masks"})
    g = _strict(doc["grid"], "grid", {"h", "w"}, {"channels"})
    grid = GridConfig(_int(g["h"], "grid.h"), _int(g["w"], "grid.w"), _int(g.get("channels", 1), "grid.channels"))

    p = _strict(doc["prompts"], "prompts", {"global_tokens", "textual"})
    if not isinstance(p["textual"], list):
        raise ConfigError("prompts.textual: expected a list")
    textual = []
    for i, tp in enumerate(p["textual"]):
        tp = _strict(tp, f"prompts.textual[{i}]", {"tokens", "bbox"})
        bbox = tp["bbox"]
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise ConfigError(f"prompts.textual[{i}].bbox: expected 4 numbers")
        textual.append(TextualPrompt(_int_list(tp["tokens"], f"prompts.textual[{i}].tokens"), [_num(v, f"prompts.textual[{i}].bbox") for v in bbox]))
    prompts = PromptsConfig(_int_list(p["global_tokens"], "prompts.global_tokens"), textual)

    names = {f.name for f in fields(ScheduleConfig)}
    s = _strict(doc["schedule"], "schedule", {"T", "T_init", "T_focus", "T_expn"}, names)
    sched = ScheduleConfig(
        T=_int(s["T"], "schedule.T"),
        T_init=_int(s["T_init"], "schedule.T_init"),
        T_focus=_int(s["T_focus"], "schedule.T_focus"),
        T_expn=_int(s["T_expn"], "schedule.T_expn"),
        alpha=_num(s.get("alpha", 0.7), "schedule.alpha"),
        guidance=_num(s.get("guidance", 5.0), "schedule.guidance"),
    )

    m = _strict(doc["model"], "model", {"checkpoint"})
    if not isinstance(m["checkpoint"], str):
        raise ConfigError("model.checkpoint: expected a string")
    if m["checkpoint"].startswith("random:"):
        try:
            int(m["checkpoint"].split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"model.checkpoint: bad random seed in {m['checkpoint']!r}") from None

    o = _strict(doc["outputs"], "outputs", {"dir"}, {"snapshot_stages"})
    if not isinstance(o["dir"], str):
        raise ConfigError("outputs.dir: expected a string")
    stages = _str_list(o.get("snapshot_stages", []), "outputs.snapshot_stages")
    bad = set(stages) - set(STAGES)
    if bad:
        raise ConfigError(f"outputs.snapshot_stages: unknown stages {sorted(bad)}")

    drop: list[str] = []
    if "masks" in doc:
        mk = _strict(doc["masks"], "masks", set(), {"focus_drop"})
        drop = _str_list(mk.get("focus_drop", []), "masks.focus_drop")
        bad = set(drop) - set(PARTIAL_MASKS)
        if bad:
            raise ConfigError(f"masks.focus_drop: unknown partial masks {sorted(bad)}")

    return RunConfig(
        seed=_int(doc["seed"], "seed"),
        grid=grid,
        prompts=prompts,
        schedule=sched,
        model=ModelRef(m["checkpoint"]),
        outputs=OutputsConfig(o["dir"], stages),
        focus_drop=drop,
        base_dir=base_dir,
    )


def _coerce(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.path=value`` overrides; values are parsed as JSON when possible."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _coerce(raw)
        else:
            node[last] = _coerce(raw)
    return doc


def load_config(path, overrides: Optional[list[str]] = None) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    try:
        doc = apply_overrides(doc, overrides or [])
    except (IndexError, ValueError, TypeError, AttributeError) as exc:
        raise ConfigError(f"bad override: {exc}") from exc
    return parse_config(doc, base_dir=path.resolve().parent)
