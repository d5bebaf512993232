"""Experiment configuration: TOML parsing, profiles, validation and overrides.

Every key is addressed by its dotted path (``objective.q``); unknown keys are
rejected and values are range-checked here so that errors name the key.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adaptation import METHODS
from .data import SplitSpec
from .losses import KdConfig, PaflSchedule, Segment, LOSS_KINDS
from .model import SgdConfig
from .objectives import OBJECTIVE_KINDS, ObjectiveSpec
from .runtime import FedConfig


class ConfigError(ValueError):
    pass


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 <= v <= 1


def _one_of(*opts):
    return (lambda v: v in opts), "must be one of " + ", ".join(opts)


# (type, default, check, message)
_Field = tuple[str, Any, Optional[Callable[[Any], bool]], str]

_SGD_FIELDS: dict[str, _Field] = {
    "lr": ("float", 0.1, _nonneg, "must be ≥ 0"),
    "momentum": ("float", 0.0, lambda v: 0 <= v < 1, "must be in [0, 1)"),
    "weight_decay": ("float", 0.0, _nonneg, "must be ≥ 0"),
    "batch_size": ("int", 20, _pos, "must be ≥ 1"),
    "epochs": ("int", 2, _nonneg, "must be ≥ 0"),
}

SCHEMA: dict[str, dict[str, _Field]] = {
    "data": {
        "source": ("str", "synthetic", *_one_of("synthetic", "dirichlet", "csv")),
        "num_clients": ("int", 50, _pos, "must be ≥ 1"),
        "classes": ("int", 10, lambda v: v >= 2, "must be ≥ 2"),
        "dims": ("int", 20, _pos, "must be ≥ 1"),
        "per_client_min": ("int", 60, _pos, "must be ≥ 1"),
        "per_client_max": ("int", 120, _pos, "must be ≥ 1"),
        "heterogeneity": ("float", 0.8, _unit, "must be in [0, 1]"),
        "separation": ("float", 0.5, _pos, "must be > 0"),
        "noise": ("float", 1.0, _pos, "must be > 0"),
        "alpha": ("float", 0.9, _pos, "must be > 0"),
        "samples": ("int", 5000, _pos, "must be ≥ 1"),
        "global_test_size": ("int", 0, _nonneg, "must be ≥ 0"),
        "split": ("floatlist", [0.7, 0.1, 0.2], None, ""),
        "ordered": ("bool", False, None, ""),
        "csv_dir": ("str", "", None, ""),
        "min_samples": ("int", 10, _nonneg, "must be ≥ 0"),
    },
    "model": {
        "hidden": ("intlist", [32], lambda v: all(h >= 1 for h in v), "entries must be ≥ 1"),
    },
    "train": {
        "rounds": ("int", 200, _nonneg, "must be ≥ 0"),
        "clients_per_round": ("int", 10, _pos, "must be ≥ 1"),
        "eval_every": ("int", 10, _pos, "must be ≥ 1"),
        **_SGD_FIELDS,
        "loss_probe": ("str", "pre", *_one_of("pre", "post")),
        "fed_test_fraction": ("float", 1.0, lambda v: 0 < v <= 1, "must be in (0, 1]"),
        "fisher_samples": ("int", 256, _pos, "must be ≥ 1"),
    },
    "objective": {
        "kind": ("str", "fedavg", *_one_of(*OBJECTIVE_KINDS)),
        "q": ("float", 0.0, _nonneg, "must be ≥ 0"),
        "t_tilt": ("float", 1.0, _pos, "must be > 0"),
        "eta": ("float", 1.0, _pos, "must be > 0"),
    },
    "pafl": {
        "preset": ("str", "none", *_one_of("none", "h_kd", "h_ewc", "custom")),
        "ewc_lambda": ("float", 5000.0, _nonneg, "must be ≥ 0"),
        "kd_T": ("float", 6.0, _pos, "must be > 0"),
        "kd_alpha": ("float", 0.95, _unit, "must be in [0, 1]"),
        "segments": ("segments", [], None, ""),
    },
    "adapt": {
        "methods": ("strlist", ["fb", "ewc", "kd"], lambda v: all(m in METHODS for m in v),
                    "entries must be among " + ", ".join(METHODS)),
        **_SGD_FIELDS,
        # local baselines and adaptation run to near-convergence on small client sets
        "lr": ("float", 0.01, _nonneg, "must be ≥ 0"),
        "epochs": ("int", 20, _nonneg, "must be ≥ 0"),
        "ewc_lambda": ("float", 5000.0, _nonneg, "must be ≥ 0"),
        "kd_T": ("float", 6.0, _pos, "must be > 0"),
        "kd_alpha": ("float", 0.95, _unit, "must be in [0, 1]"),
        "fisher_samples": ("int", 256, _pos, "must be ≥ 1"),
        "max_clients": ("int", 0, _nonneg, "must be ≥ 0 (0 means all clients)"),
    },
    "sweep": {
        "q": ("floatlist", [], lambda v: all(x >= 0 for x in v), "entries must be ≥ 0"),
        "t_tilt": ("floatlist", [], lambda v: all(x > 0 for x in v), "entries must be > 0"),
        "pafl": ("strlist", [], lambda v: all(x in ("h_kd", "h_ewc") for x in v), "entries must be h_kd or h_ewc"),
    },
}

_TOP_LEVEL = {"seed": ("int", 0, _nonneg, "must be ≥ 0"), "profile": ("str", "synthetic", None, "")}
_VARIANT_KEYS = {"name", "objective", "pafl"}
_SEGMENT_FIELDS: dict[str, _Field] = {
    "from_round": ("int", None, _nonneg, "must be ≥ 0"),
    "mu": ("float", 1.0, _unit, "must be in [0, 1]"),
    "loss": ("str", "none", *_one_of(*LOSS_KINDS)),
    "lam": ("float", 0.0, _nonneg, "must be ≥ 0"),
    "T": ("float", 6.0, _pos, "must be > 0"),
    "alpha": ("float", 0.95, _unit, "must be in [0, 1]"),
}

# Desk-scale presets: client/sample counts shrunk, per-dataset protocol kept
# (splits, clients per round, epochs, batch sizes, momentum, eta).
PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "synthetic": {},
    "reddit-like": {
        "data": {"source": "synthetic", "num_clients": 100, "per_client_min": 40, "per_client_max": 150,
                 "heterogeneity": 0.6, "split": [0.9, 0.1, 0.0], "ordered": True, "global_test_size": 2000},
        "train": {"rounds": 100, "clients_per_round": 20, "epochs": 2, "batch_size": 20, "lr": 0.1},
        "adapt": {"lr": 0.01, "batch_size": 20, "epochs": 20},
    },
    "femnist-like": {
        "data": {"source": "synthetic", "num_clients": 100, "per_client_min": 30, "per_client_max": 200,
                 "heterogeneity": 0.7, "split": [0.7, 0.1, 0.2], "min_samples": 10},
        "train": {"rounds": 100, "clients_per_round": 10, "epochs": 2, "batch_size": 32, "lr": 0.1},
        "objective": {"eta": 1.0},
        "adapt": {"lr": 0.01, "batch_size": 32, "epochs": 20},
    },
    "cifar-like": {
        "data": {"source": "dirichlet", "num_clients": 100, "samples": 10000, "alpha": 0.9,
                 "split": [0.7, 0.1, 0.2]},
        "train": {"rounds": 100, "clients_per_round": 10, "epochs": 2, "batch_size": 32, "lr": 0.05,
                  "momentum": 0.9, "weight_decay": 5e-4},
        "adapt": {"lr": 1e-3, "batch_size": 32, "epochs": 20, "momentum": 0.9, "weight_decay": 5e-4},
    },
}


@dataclass(frozen=True)
class Variant:
    name: str
    objective: ObjectiveSpec
    schedule: PaflSchedule


@dataclass(frozen=True)
class AdaptConfig:
    methods: tuple[str, ...]
    sgd: SgdConfig
    ewc_lambda: float
    kd: KdConfig
    fisher_samples: int
    max_clients: int


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    profile: str
    data: dict[str, Any]
    hidden: tuple[int, ...]
    train: FedConfig
    variants: tuple[Variant, ...]
    adapt: AdaptConfig
    resolved: dict[str, Any]

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(*self.data["split"])

    def fed_config(self, variant: Variant) -> FedConfig:
        t = self.train
        return FedConfig(
            rounds=t.rounds, clients_per_round=t.clients_per_round, objective=variant.objective,
            local=t.local, schedule=variant.schedule, seed=t.seed, eval_every=t.eval_every,
            loss_probe=t.loss_probe, fed_test_fraction=t.fed_test_fraction, fisher_samples=t.fisher_samples,
        )


# --- coercion ------------------------------------------------------------------


def _coerce(path: str, value: Any, kind: str) -> Any:
    def bad(expected: str):
        return ConfigError(f"{path} must be {expected}, got {value!r}")

    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        if not math.isfinite(value):
            raise bad("finite")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad("true or false")
        return value
    if kind in ("floatlist", "intlist", "strlist"):
        if not isinstance(value, list):
            raise bad("a list")
        inner = kind[: -len("list")]
        return [_coerce(f"{path}[{i}]", v, inner) for i, v in enumerate(value)]
    raise AssertionError(kind)


def _read_table(path: str, table: Any, fields: dict[str, _Field], partial: bool = False) -> dict[str, Any]:
    if not isinstance(table, dict):
        raise ConfigError(f"{path} must be a table")
    for key in table:
        if key not in fields:
            raise ConfigError(f"unknown key {path}.{key}" if path else f"unknown key {key}")
    out = {}
    for key, (kind, default, check, msg) in fields.items():
        full = f"{path}.{key}" if path else key
        if key not in table:
            if partial:
                continue
            if default is None:
                raise ConfigError(f"{full} is required")
            out[key] = copy.deepcopy(default)
            continue
        if kind == "segments":
            out[key] = _read_segments(full, table[key])
            continue
        val = _coerce(full, table[key], kind)
        if check is not None and not check(val):
            raise ConfigError(f"{full} {msg}")
        out[key] = val
    return out


def _read_segments(path: str, value: Any) -> list[dict[str, Any]]:
    if not isinstance(value, list):
        raise ConfigError(f"{path} must be a list of tables")
    segs = [_read_table(f"{path}[{i}]", s, _SEGMENT_FIELDS) for i, s in enumerate(value)]
    for i in range(1, len(segs)):
        if segs[i]["from_round"] <= segs[i - 1]["from_round"]:
            raise ConfigError(f"{path}[{i}].from_round must be greater than {path}[{i - 1}].from_round (segments out of order)")
    if segs and segs[0]["from_round"] != 0:
        raise ConfigError(f"{path}[0].from_round must be 0")
    return segs


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# --- schedule / variants ---------------------------------------------------------


def build_schedule(pafl: dict[str, Any], rounds: int, path: str = "pafl") -> PaflSchedule:
    preset = pafl["preset"]
    kd = KdConfig(pafl["kd_T"], pafl["kd_alpha"])
    if preset == "none":
        return PaflSchedule.fedavg()
    if preset == "h_kd":
        return PaflSchedule.halfway(rounds, "kd", kd=kd)
    if preset == "h_ewc":
        return PaflSchedule.halfway(rounds, "ewc", lam=pafl["ewc_lambda"])
    segs = pafl["segments"]
    if not segs:
        raise ConfigError(f"{path}.segments must be non-empty when {path}.preset = 'custom'")
    return PaflSchedule(tuple(
        Segment(s["from_round"], s["mu"], s["loss"], s["lam"], KdConfig(s["T"], s["alpha"]) if s["loss"] == "kd" else None)
        for s in segs
    ))


def _variant_name(obj: ObjectiveSpec, pafl: dict[str, Any]) -> str:
    preset = pafl["preset"]
    if preset in ("h_kd", "h_ewc"):
        base = "H_KD" if preset == "h_kd" else "H_EWC"
        return base if obj.kind == "fedavg" else f"{base}+{obj.label}"
    if preset == "custom":
        return f"pafl+{obj.label}"
    return obj.label


def _make_variant(raw_obj: dict, raw_pafl: dict, rounds: int, name: Optional[str], path: str) -> Variant:
    obj = ObjectiveSpec(raw_obj["kind"], raw_obj["q"], raw_obj["t_tilt"], raw_obj["eta"])
    sched = build_schedule(raw_pafl, rounds, path)
    return Variant(name or _variant_name(obj, raw_pafl), obj, sched)


def _build_variants(raw: dict, obj: dict, pafl: dict, rounds: int) -> list[Variant]:
    variants: list[Variant] = []
    sweep = _read_table("sweep", raw.get("sweep", {}), SCHEMA["sweep"])
    for q in sweep["q"]:
        variants.append(_make_variant({**obj, "kind": "qffl", "q": q}, pafl, rounds, None, "pafl"))
    for t in sweep["t_tilt"]:
        variants.append(_make_variant({**obj, "kind": "term", "t_tilt": t}, pafl, rounds, None, "pafl"))
    for preset in sweep["pafl"]:
        variants.append(_make_variant({**obj, "kind": "fedavg"}, {**pafl, "preset": preset}, rounds, None, "pafl"))
    raw_variants = raw.get("variants", [])
    if not isinstance(raw_variants, list):
        raise ConfigError("variants must be a list of tables")
    for i, v in enumerate(raw_variants):
        path = f"variants[{i}]"
        if not isinstance(v, dict):
            raise ConfigError(f"{path} must be a table")
        for key in v:
            if key not in _VARIANT_KEYS:
                raise ConfigError(f"unknown key {path}.{key}")
        name = v.get("name")
        if name is not None and not isinstance(name, str):
            raise ConfigError(f"{path}.name must be a string")
        vo = {**obj, **_read_table(f"{path}.objective", v.get("objective", {}), SCHEMA["objective"], partial=True)}
        vp = {**pafl, **_read_table(f"{path}.pafl", v.get("pafl", {}), SCHEMA["pafl"], partial=True)}
        variants.append(_make_variant(vo, vp, rounds, name, f"{path}.pafl"))
    if not variants:
        variants.append(_make_variant(obj, pafl, rounds, None, "pafl"))
    names = [v.name for v in variants]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate variant names {dupes}; set variants[].name explicitly")
    return variants


# --- entry points ----------------------------------------------------------------


def parse_override(assignment: str) -> tuple[list[str], Any]:
    """Parse ``a.b.c=value``; the value is read as a TOML literal, else a string."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    key, text = assignment.split("=", 1)
    key = key.strip()
    if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*", key):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        value = text
    return key.split("."), value


def apply_overrides(raw: dict, overrides: list[tuple[list[str], Any]]) -> dict:
    out = copy.deepcopy(raw)
    for keys, value in overrides:
        node = out
        for k in keys[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"cannot override {'.'.join(keys)}: {k} is not a table")
            node = nxt
        node[keys[-1]] = value
    return out


def build_config(raw: dict) -> ExperimentConfig:
    """Validate a raw (already merged) mapping into an ``ExperimentConfig``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table")
    allowed = set(SCHEMA) | set(_TOP_LEVEL) | {"variants"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key {key}")
    top = _read_table("", {k: raw[k] for k in _TOP_LEVEL if k in raw}, _TOP_LEVEL)
    profile = top["profile"]
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {', '.join(PROFILES)}, got {profile!r}")
    merged = _deep_merge(PROFILES[profile], {k: v for k, v in raw.items() if k in SCHEMA and k != "sweep"})

    data = _read_table("data", merged.get("data", {}), SCHEMA["data"])
    if len(data["split"]) != 3:
        raise ConfigError("data.split must have exactly 3 entries (train, local_test, fed_test)")
    try:
        SplitSpec(*data["split"])
    except ValueError as exc:
        raise ConfigError(f"data.split: {exc}") from None
    if data["per_client_min"] > data["per_client_max"]:
        raise ConfigError("data.per_client_min must be ≤ data.per_client_max")
    if data["source"] == "csv" and not data["csv_dir"]:
        raise ConfigError("data.csv_dir is required when data.source = 'csv'")

    model = _read_table("model", merged.get("model", {}), SCHEMA["model"])
    tr = _read_table("train", merged.get("train", {}), SCHEMA["train"])
    obj = _read_table("objective", merged.get("objective", {}), SCHEMA["objective"])
    pafl = _read_table("pafl", merged.get("pafl", {}), SCHEMA["pafl"])
    ad = _read_table("adapt", merged.get("adapt", {}), SCHEMA["adapt"])
    if data["source"] != "csv" and tr["clients_per_round"] > data["num_clients"]:
        raise ConfigError("train.clients_per_round must be ≤ data.num_clients")

    seed = top["seed"]
    local = SgdConfig(tr["lr"], tr["momentum"], tr["weight_decay"], tr["batch_size"], tr["epochs"])
    fed = FedConfig(
        rounds=tr["rounds"], clients_per_round=tr["clients_per_round"], local=local, seed=seed,
        eval_every=tr["eval_every"], loss_probe=tr["loss_probe"], fed_test_fraction=tr["fed_test_fraction"],
        fisher_samples=tr["fisher_samples"],
    )
    variants = _build_variants(raw, obj, pafl, tr["rounds"])
    adapt = AdaptConfig(
        methods=tuple(ad["methods"]),
        sgd=SgdConfig(ad["lr"], ad["momentum"], ad["weight_decay"], ad["batch_size"], ad["epochs"]),
        ewc_lambda=ad["ewc_lambda"], kd=KdConfig(ad["kd_T"], ad["kd_alpha"]),
        fisher_samples=ad["fisher_samples"], max_clients=ad["max_clients"],
    )
    resolved = {"seed": seed, "profile": profile, "data": data, "model": model, "train": tr,
                "objective": obj, "pafl": pafl, "adapt": ad,
                "variants": [{"name": v.name, "objective": v.objective.__dict__,
                              "schedule": [s.__dict__ | {"kd": s.kd.__dict__ if s.kd else None}
                                           for s in v.schedule.segments]} for v in variants]}
    return ExperimentConfig(seed, profile, data, tuple(model["hidden"]), fed, tuple(variants), adapt, resolved)


def parse_config(path=None, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    if overrides:
        raw = apply_overrides(raw, [parse_override(o) for o in overrides])
    try:
        return build_config(raw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
