"""Pipeline configuration: nested blocks loaded from JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from ..errors import InvalidConfig, IoError
from ..lm import InterpolationSpec
from ..rescore import DEFAULT_GRID
from .synth import WorldSpec

STAGES = ("lm", "rescore", "cn", "combine", "score", "tables")


@dataclass(frozen=True)
class StageToggles:
    lm: bool = True
    rescore: bool = True
    cn: bool = True
    combine: bool = True
    score: bool = True
    tables: bool = True

    def enabled(self, stage):
        return getattr(self, stage)


@dataclass(frozen=True)
class LmBlock:
    ngram_order: int = 3
    min_count: int = 2
    interpolation: tuple = (0.375, 0.375, 0.25)
    # overrides applied to RnnLMConfig for every recurrent model
    rnn: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "interpolation", tuple(float(x) for x in self.interpolation))
        InterpolationSpec(self.interpolation)
        if self.ngram_order < 1:
            raise InvalidConfig("ngram_order must be >= 1")


@dataclass(frozen=True)
class RescoreBlock:
    nbest: int = 500
    grid: tuple = DEFAULT_GRID
    sweeps: int = 3
    neural: bool = True

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(float(x) for x in self.grid))
        if self.nbest < 1 or self.sweeps < 1:
            raise InvalidConfig("nbest and sweeps must be >= 1")


@dataclass(frozen=True)
class CombineBlock:
    posterior_scale: float = 0.05
    ladder: tuple = (1.0, 0.5, 0.2, 0.1)
    groups: tuple | None = None       # lists of system ids; None = one group per system
    estimate_weights: bool = False
    smooth: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "ladder", tuple(float(x) for x in self.ladder))
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))
            if any(not g for g in self.groups):
                raise InvalidConfig("combination groups must be non-empty")
        if not self.ladder or any(x <= 0 for x in self.ladder):
            raise InvalidConfig("ladder weights must be positive")
        if not 0.0 <= self.smooth <= 1.0:
            raise InvalidConfig("smooth must lie in [0, 1]")
        if self.posterior_scale <= 0:
            raise InvalidConfig("posterior_scale must be positive")


@dataclass(frozen=True)
class AmBlock:
    hidden: tuple = (64, 64)
    objective: str = "ce"
    smoothing: float = 0.1
    epochs: int = 10
    learning_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.objective not in ("ce", "lfmmi"):
            raise InvalidConfig(f"unknown AM objective {self.objective!r}")
        if self.smoothing < 0:
            raise InvalidConfig("smoothing weight must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str = "run"
    data_dir: str | None = None     # existing generated world; None = generate under out_dir
    seed: int = 17
    jobs: int = 1
    world: WorldSpec = WorldSpec()
    stages: StageToggles = StageToggles()
    lm: LmBlock = LmBlock()
    rescore: RescoreBlock = RescoreBlock()
    combine: CombineBlock = CombineBlock()
    am: AmBlock = AmBlock()

    def __post_init__(self):
        if self.jobs < 1:
            raise InvalidConfig("jobs must be >= 1")
        if self.world.seed != self.seed:
            object.__setattr__(self, "world", dataclasses.replace(self.world, seed=self.seed))

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, "config")

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def read(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except OSError as e:
            raise IoError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"{path}: {e}") from e
        return cls.from_dict(d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise InvalidConfig(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise InvalidConfig(f"{where}: unknown keys {unknown}")
    kw = {}
    for k, v in d.items():
        default = getattr(cls(), k)
        if dataclasses.is_dataclass(default) and not isinstance(default, type):
            kw[k] = _build(type(default), v, f"{where}.{k}")
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except TypeError as e:
        raise InvalidConfig(f"{where}: {e}") from e
