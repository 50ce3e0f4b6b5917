"""Experiment configuration: dataclasses, YAML loading, schema validation and overrides.

Configs are hierarchical YAML files. Every section and key is optional
except ``dataset.n_classes`` and ``dataset.dim``; unknown keys are
rejected. Validation goes through a JSON schema generated from the
dataclasses below, and errors are reported with the YAML line they refer
to.

Overrides, applied in this order on top of the file:

* environment variables ``DFA__SECTION__KEY=value`` (``__`` separates levels),
* ``--set key=value`` pairs, where ``key`` is a dotted path
  (``optim.lr``) or a leaf name that is unique across the config
  (``alpha1``, ``gamma``).

Values are parsed as YAML scalars, so ``0``, ``0.1``, ``true`` and
``[1, 2]`` do what one expects.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import re

import jsonschema
import yaml

ENV_PREFIX = "DFA__"
MODES = ("dfa", "s+t", "ent")


class ConfigValidationError(ValueError):
    def __init__(self, message: str, key: str = "", line: Optional[int] = None, source: str = ""):
        self.key, self.line, self.source = key, line, source
        where = f"{source}:{line}: " if line is not None else (f"{source}: " if source else "")
        super().__init__(f"{where}{message}")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-4``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def _choices(*values):
    return {"enum": list(values)}


@dataclass
class ShiftConfig:
    kind: str = field(default="rotation", metadata=_choices("rotation", "translation", "scale", "mixed"))
    magnitude: float = 30.0
    noise_std: float = field(default=0.0, metadata={"minimum": 0})
    class_imbalance: Optional[list[float]] = None


@dataclass
class DatasetConfig:
    n_classes: int = field(metadata={"minimum": 2})
    dim: int = field(metadata={"minimum": 1})
    n_source: int = 500
    n_unlabeled: int = 500
    shots: int = field(default=3, metadata={"minimum": 1})
    cluster_std: float = field(default=1.0, metadata={"exclusiveMinimum": 0})
    radius: float = 4.0
    shift: ShiftConfig = field(default_factory=ShiftConfig)


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    feature_dim: int = field(default=16, metadata={"minimum": 2})
    activation: str = field(default="relu", metadata=_choices("relu", "tanh", "gelu"))
    temperature: float = field(default=0.05, metadata={"exclusiveMinimum": 0})
    normalize_weights: bool = True
    dtype: str = field(default="float32", metadata=_choices("float32", "float64"))


@dataclass
class BankConfig:
    gamma: float = field(default=0.1, metadata={"minimum": 0, "maximum": 1})


@dataclass
class KernelConfig:
    strategy: str = field(default="median_heuristic", metadata=_choices("median_heuristic", "fixed_list"))
    sigmas: Optional[list[float]] = None
    n_kernels: int = field(default=5, metadata={"minimum": 1})


@dataclass
class MMDConfig:
    kernel: KernelConfig = field(default_factory=KernelConfig)
    detach_prototypes: bool = True


@dataclass
class PseudoConfig:
    tau_p: float = field(default=0.07, metadata={"exclusiveMinimum": 0})
    eps_dist: float = 0.3
    eps_ent: float = 0.5
    warmup_fraction: float = field(default=0.1, metadata={"minimum": 0, "maximum": 1})


@dataclass
class PerturbConfig:
    radius: float = field(default=0.5, metadata={"exclusiveMinimum": 0})
    xi: float = field(default=1e-4, metadata={"exclusiveMinimum": 0})
    power_iters: int = field(default=1, metadata={"minimum": 1})


@dataclass
class LossConfig:
    alpha1: float = field(default=1.0, metadata={"minimum": 0})
    alpha2: float = field(default=1.0, metadata={"minimum": 0})
    alpha3: float = field(default=1.0, metadata={"minimum": 0})
    # weight of the entropy term in ``ent`` mode
    ent_weight: float = field(default=0.1, metadata={"minimum": 0})


@dataclass
class OptimConfig:
    lr: float = field(default=0.01, metadata={"exclusiveMinimum": 0})
    momentum: float = field(default=0.9, metadata={"minimum": 0, "exclusiveMaximum": 1})
    weight_decay: float = field(default=5e-4, metadata={"minimum": 0})
    iterations: int = field(default=1000, metadata={"minimum": 1})
    schedule: str = field(default="inv", metadata=_choices("inv", "constant"))
    batch_size: int = field(default=32, metadata={"minimum": 2, "multipleOf": 2})
    unlabeled_batch_size: int = field(default=32, metadata={"minimum": 2})


@dataclass
class EvalConfig:
    interval: int = field(default=50, metadata={"minimum": 1})
    # 0 writes only the final checkpoint
    checkpoint_interval: int = field(default=0, metadata={"minimum": 0})


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    mode: str = field(default="dfa", metadata=_choices(*MODES))
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    mmd: MMDConfig = field(default_factory=MMDConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``cfg.replace(**{"bank.gamma": 0.5})``."""
        raw = self.to_dict()
        for key, value in dotted.items():
            _set_path(raw, _resolve_key(key), value)
        return from_dict(raw)


# -- schema -----------------------------------------------------------------

def _type_schema(tp) -> dict:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        inner = [a for a in args if a is not type(None)][0]
        return {"anyOf": [_type_schema(inner), {"type": "null"}]}
    if origin is list:
        return {"type": "array", "items": _type_schema(args[0])}
    if dataclasses.is_dataclass(tp):
        return dataclass_schema(tp)
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    raise TypeError(f"no schema for {tp!r}")


def dataclass_schema(cls) -> dict:
    hints = typing.get_type_hints(cls)
    props, required = {}, []
    for f in dataclasses.fields(cls):
        props[f.name] = {**_type_schema(hints[f.name]), **dict(f.metadata)}
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            required.append(f.name)
    out = {"type": "object", "properties": props, "additionalProperties": False}
    if required:
        out["required"] = required
    return out


SCHEMA = {"$schema": "http://json-schema.org/draft-07/schema#", "title": "dfa experiment config",
          **dataclass_schema(ExperimentConfig)}


def _leaf_paths(cls=ExperimentConfig, prefix=()) -> list[tuple]:
    hints = typing.get_type_hints(cls)
    out = []
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            out += _leaf_paths(tp, prefix + (f.name,))
        else:
            out.append(prefix + (f.name,))
    return out


def _resolve_key(key: str) -> tuple:
    if "." in key:
        return tuple(key.split("."))
    hits = [p for p in _leaf_paths() if p[-1] == key]
    if len(hits) == 1:
        return hits[0]
    if not hits:
        # top-level sections and unknown names go through as-is; the schema rejects unknowns
        return (key,)
    raise ConfigValidationError(f"ambiguous key {key!r}; use one of {['.'.join(h) for h in hits]}", key)


def _set_path(raw: dict, path: tuple, value) -> None:
    node = raw
    for part in path[:-1]:
        if node.get(part) is None:
            node[part] = {}
        node = node[part]
        if not isinstance(node, dict):
            raise ConfigValidationError(f"cannot set {'.'.join(path)}: {part} is not a section", ".".join(path))
    node[path[-1]] = value


def parse_override(item: str) -> tuple[tuple, Any]:
    if "=" not in item:
        raise ConfigValidationError(f"override {item!r} is not key=value", item)
    key, text = item.split("=", 1)
    return _resolve_key(key.strip()), _load_yaml(text) if text.strip() else None


def env_overrides(environ=None) -> list[tuple[tuple, Any]]:
    environ = os.environ if environ is None else environ
    out = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            path = tuple(p.lower() for p in name[len(ENV_PREFIX):].split("__") if p)
            if len(path) == 1:
                path = _resolve_key(path[0])
            out.append((path, _load_yaml(environ[name])))
    return out


# -- loading ----------------------------------------------------------------

def _node_for(root, path) -> Optional[yaml.Node]:
    node = root
    for part in path:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == part:
                    nxt = v
            if nxt is None:
                return node
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
        else:
            return node
    return node


def _key_line(root, path, key) -> Optional[int]:
    parent = _node_for(root, path)
    if isinstance(parent, yaml.MappingNode):
        for k, _ in parent.value:
            if k.value == key:
                return k.start_mark.line + 1
    return parent.start_mark.line + 1 if parent is not None else None


def validate(raw: dict, root=None, source: str = "", overridden=frozenset()) -> None:
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if not errors:
        return
    err = errors[0]
    path = list(err.absolute_path)
    dotted = ".".join(str(p) for p in path)
    line = None
    if tuple(map(str, path)) in overridden:
        raise ConfigValidationError(f"invalid override for {dotted!r}: {err.message}", dotted, None, source)
    if err.validator == "required":
        missing = err.message.split("'")[1]
        key = ".".join([*map(str, path), missing])
        if root is not None:
            line = _node_for(root, path).start_mark.line + 1 if path else 1
        raise ConfigValidationError(f"missing required key {key!r}", key, line, source)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema["properties"]))[0]
        key = ".".join([*map(str, path), extra])
        if root is not None:
            line = _key_line(root, path, extra)
        raise ConfigValidationError(f"unknown key {key!r}", key, line, source)
    if root is not None:
        node = _node_for(root, path)
        line = node.start_mark.line + 1 if node is not None else None
    raise ConfigValidationError(f"invalid value for {dotted!r}: {err.message}", dotted, line, source)


def _build(cls, raw: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        if dataclasses.is_dataclass(hints[f.name]):
            value = _build(hints[f.name], value or {})
        elif hints[f.name] is float and isinstance(value, int):
            value = float(value)
        kwargs[f.name] = copy.deepcopy(value)
    return cls(**kwargs)


def from_dict(raw: dict, root=None, source: str = "", overridden=frozenset()) -> ExperimentConfig:
    validate(raw, root, source, overridden)
    return _build(ExperimentConfig, raw)


def load_config(path, overrides=(), environ=None) -> ExperimentConfig:
    """Load a YAML config, apply env and ``key=value`` overrides, validate."""
    path = Path(path)
    text = path.read_text()
    try:
        root = yaml.compose(text, Loader=_Loader)
        raw = _load_yaml(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigValidationError(f"YAML parse error: {exc}", line=mark.line + 1 if mark else None,
                                    source=str(path)) from exc
    if not isinstance(raw, dict):
        raise ConfigValidationError("top level must be a mapping", line=1, source=str(path))
    overridden = set()
    for key_path, value in env_overrides(environ):
        _set_path(raw, key_path, value)
        overridden.add(tuple(key_path))
    for item in overrides:
        key_path, value = parse_override(item) if isinstance(item, str) else item
        _set_path(raw, key_path, value)
        overridden.add(tuple(key_path))
    return from_dict(raw, root, str(path), frozenset(overridden))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.to_yaml())
