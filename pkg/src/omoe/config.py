"""JSON run configuration and model construction."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field

from .backbone import AdapterConfig, BackboneConfig, InjectionSpec, build_backbone, inject_adapters, layer_bands
from .errors import ConfigError
from .tasks import RULES, SynthTask
from .train import TrainConfig


@dataclass
class TaskConfig:
    rules: tuple = RULES
    n_train: int = 512
    n_test: int = 128
    length: int = 9

    def build(self):
        return [SynthTask(RULES.index(r), r, self.n_train, self.n_test, self.length) for r in self.rules]


@dataclass
class RunConfig:
    """Everything needed to reproduce one training run.

    Missing ``train`` keys fall back to the desk-scale preset unless the
    section sets ``"preset": "full"``.
    """

    name: str = "omoe"
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    injection: InjectionSpec = field(default_factory=InjectionSpec)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    output_dir: str = "runs/omoe"
    sweep: dict = field(default_factory=dict)

    def validate(self):
        self.backbone.validate()
        self.injection.validate()
        if self.injection.band_sizes is not None:
            layer_bands(self.backbone.n_layers, self.injection.band_sizes)
        self.adapter.validate(self.backbone, self.injection.targets)
        self.train.validate()
        if not self.tasks.rules:
            raise ConfigError("tasks.rules", "need at least one task")
        for r in self.tasks.rules:
            if r not in RULES:
                raise ConfigError("tasks.rules", f"unknown rule {r!r}; expected one of {', '.join(RULES)}")
        if len(set(self.tasks.rules)) != len(self.tasks.rules):
            raise ConfigError("tasks.rules", "duplicate rules")
        if self.tasks.n_train < 1 or self.tasks.n_test < 1:
            raise ConfigError("tasks.n_train", "split sizes must be positive")
        if self.tasks.length < 1:
            raise ConfigError("tasks.length", "must be positive")
        if "majority" in self.tasks.rules and self.tasks.length % 2 == 0:
            raise ConfigError("tasks.length", "the majority rule needs an odd length")
        if self.tasks.length + 2 > self.backbone.max_seq:
            raise ConfigError("tasks.length", f"sequences of {self.tasks.length + 2} tokens exceed max_seq={self.backbone.max_seq}")
        if self.backbone.vocab_size < 16:
            raise ConfigError("backbone.vocab_size", "synthetic tasks need vocab_size >= 16")
        for key, values in self.sweep.items():
            if key not in {f.name for f in dataclasses.fields(AdapterConfig)}:
                raise ConfigError(f"sweep.{key}", "only adapter fields can be swept")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep.{key}", "must be a non-empty list")
        return self

    # -- (de)serialization ----------------------------------------------
    def to_dict(self):
        d = dataclasses.asdict(self)
        d["injection"]["layer_pattern"] = self.injection.layer_pattern.value
        d["injection"]["targets"] = list(self.injection.targets)
        d["train"]["betas"] = list(self.train.betas)
        d["train"]["seeds"] = list(self.train.seeds)
        d["tasks"]["rules"] = list(self.tasks.rules)
        return d

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        raw = copy.deepcopy(raw)
        top = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in top:
                raise ConfigError(key, "unknown configuration key")
        train_raw = dict(raw.pop("train", {}) or {})
        preset = train_raw.pop("preset", "desk")
        if preset not in ("desk", "full"):
            raise ConfigError("train.preset", "must be 'desk' or 'full'")
        base_train = TrainConfig.desk() if preset == "desk" else TrainConfig()
        kwargs = {
            "backbone": _section(BackboneConfig, raw.pop("backbone", {}), "backbone"),
            "injection": _section(InjectionSpec, raw.pop("injection", {}), "injection"),
            "adapter": _section(AdapterConfig, raw.pop("adapter", {}), "adapter"),
            "train": _section(TrainConfig, train_raw, "train", base=base_train),
            "tasks": _section(TaskConfig, raw.pop("tasks", {}), "tasks"),
        }
        for key in ("betas", "seeds"):
            setattr(kwargs["train"], key, tuple(getattr(kwargs["train"], key)))
        kwargs["tasks"].rules = tuple(kwargs["tasks"].rules)
        for key, typ in (("name", str), ("seed", int), ("output_dir", str), ("sweep", dict)):
            if key in raw:
                if not isinstance(raw[key], typ) or isinstance(raw[key], bool):
                    raise ConfigError(key, f"expected {typ.__name__}")
                kwargs[key] = raw[key]
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def replace(self, **changes):
        """Copy with top-level or dotted (``"adapter.rank"``) fields changed."""
        new = copy.deepcopy(self)
        for key, value in changes.items():
            obj = new
            *path, last = key.split(".")
            for p in path:
                obj = getattr(obj, p)
            setattr(obj, last, value)
        if isinstance(new.injection.layer_pattern, str):
            new.injection.layer_pattern = InjectionSpec(layer_pattern=new.injection.layer_pattern).layer_pattern
        return new.validate()


def _section(cls, raw, prefix, base=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "expected a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}", "unknown configuration key")
    obj = copy.deepcopy(base) if base is not None else cls()
    for key, value in raw.items():
        default = getattr(obj, key)
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{prefix}.{key}", "expected true or false")
        if isinstance(default, int) and not isinstance(default, bool) and not (isinstance(value, int) and not isinstance(value, bool)):
            raise ConfigError(f"{prefix}.{key}", f"expected an integer, got {value!r}")
        if isinstance(default, float) and not (isinstance(value, (int, float)) and not isinstance(value, bool)):
            raise ConfigError(f"{prefix}.{key}", f"expected a number, got {value!r}")
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{prefix}.{key}", f"expected a string, got {value!r}")
        if isinstance(default, tuple) and not isinstance(value, list):
            raise ConfigError(f"{prefix}.{key}", "expected a list")
        setattr(obj, key, float(value) if isinstance(default, float) else value)
    if isinstance(obj, InjectionSpec):
        obj.__post_init__()
    return obj


def build_model(run, seed=None):
    """Frozen backbone (seeded by ``backbone.seed``) with adapters seeded by ``seed``."""
    seed = run.seed if seed is None else seed
    base = build_backbone(run.backbone)
    return inject_adapters(base, run.injection, run.adapter, seed=seed, dropout=run.train.dropout)
