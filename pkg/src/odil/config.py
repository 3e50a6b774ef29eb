"""Declarative experiment configuration (JSON) with the reference defaults baked in."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adaptation import SCHEDULE_PRESETS, AdaptationConfig, MomentumSchedule
from .data import SCENES, Domain, DomainSpec, default_stream_specs, gen_synthetic_domain, load_feature_dir
from .errors import ConfigError, DataError
from .nn import Model, ModelConfig, reference_config
from .strategies import ALL_STRATEGIES, Strategy, TrainConfig


@dataclass(frozen=True)
class ModelSettings:
    widths: tuple[int, ...] = (16, 32)
    input_shape: tuple[int, ...] = (16, 16, 1)
    num_classes: int = len(SCENES)
    kernel: int = 3
    dtype: str = "float32"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def model_config(self) -> ModelConfig:
        cfg = reference_config(self.widths, self.input_shape, self.num_classes, self.kernel)
        return ModelConfig(cfg.input_shape, cfg.layers, cfg.num_classes, self.bn_eps, self.bn_momentum)

    def build(self, seed: int) -> Model:
        return Model(self.model_config(), seed=seed, dtype=self.dtype)


@dataclass(frozen=True)
class ManifestEntry:
    """A stream domain read from precomputed feature files."""

    manifest: str
    domain_id: int
    name: str = ""
    adapt_per_class: int = 1
    adapt_from_test: bool = False

    def load(self, base_dir: Path) -> Domain:
        path = Path(self.manifest)
        if not path.is_absolute():
            path = base_dir / path
        train, test = load_feature_dir(path, self.domain_id)
        spec = DomainSpec(
            self.domain_id,
            self.name or path.stem,
            classes=test.classes,
            n_train=len(train) if train is not None else 0,
            n_test=len(test),
            adapt_per_class=self.adapt_per_class,
            adapt_from_test=self.adapt_from_test or train is None,
        )
        return Domain(spec, train, test)


@dataclass
class ExperimentConfig:
    seed: int = 0
    stream: list = field(default_factory=default_stream_specs)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    odil: AdaptationConfig = field(default_factory=AdaptationConfig)
    strategies: list[str] = field(default_factory=lambda: [s.id for s in ALL_STRATEGIES])
    exclude_adaptation_samples: bool = False
    output_dir: str = "runs/default"
    # where relative manifest paths resolve from
    base_dir: str = "."

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.stream:
            raise ConfigError("stream must contain at least one domain")
        ids = [d.domain_id for d in self.stream]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate domain ids in stream: {ids}")
        if isinstance(self.stream[0], DomainSpec) and not self.stream[0].has_train:
            raise ConfigError("the first domain needs a train split")
        for s in self.strategies:
            Strategy.parse(s)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        stream = []
        for d in self.stream:
            if isinstance(d, DomainSpec):
                stream.append(d.to_dict())
            else:
                stream.append({"manifest": d.manifest, "domain_id": d.domain_id, "name": d.name,
                               "adapt_per_class": d.adapt_per_class, "adapt_from_test": d.adapt_from_test})
        return {
            "seed": self.seed,
            "stream": stream,
            "model": {**asdict(self.model), "widths": list(self.model.widths),
                      "input_shape": list(self.model.input_shape)},
            "train": asdict(self.train),
            "odil": {**{k: v for k, v in asdict(self.odil).items() if k != "schedule"},
                     "schedule": asdict(self.odil.schedule)},
            "strategies": list(self.strategies),
            "exclude_adaptation_samples": self.exclude_adaptation_samples,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kwargs = {}
            if "stream" in d:
                kwargs["stream"] = [
                    ManifestEntry(**e) if "manifest" in e else DomainSpec.from_dict(e) for e in d["stream"]
                ]
            if "model" in d:
                m = dict(d["model"])
                for key in ("widths", "input_shape"):
                    if key in m:
                        m[key] = tuple(m[key])
                kwargs["model"] = ModelSettings(**m)
            if "train" in d:
                kwargs["train"] = TrainConfig(**d["train"])
            if "odil" in d:
                o = dict(d["odil"])
                sched = o.pop("schedule", None)
                if isinstance(sched, str):
                    if sched not in SCHEDULE_PRESETS:
                        raise ConfigError(f"unknown schedule preset {sched!r}")
                    o["schedule"] = SCHEDULE_PRESETS[sched]
                elif sched is not None:
                    o["schedule"] = MomentumSchedule(**sched)
                kwargs["odil"] = AdaptationConfig(**o)
            for key in ("seed", "strategies", "exclude_adaptation_samples", "output_dir"):
                if key in d:
                    kwargs[key] = d[key]
            return cls(base_dir=str(base_dir), **kwargs)
        except TypeError as err:
            raise ConfigError(f"invalid config: {err}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        return cls.from_dict(d, base_dir=path.parent)

    def save(self, path, include_output_dir: bool = True) -> None:
        # copies stored inside a run directory leave the location out, so the
        # directory's bytes do not depend on where it lives
        d = self.to_dict()
        if not include_output_dir:
            d.pop("output_dir")
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    def digest(self) -> str:
        """Stable hash of everything that determines results, except the seed,
        the strategy filter and the output location."""
        d = self.to_dict()
        for key in ("seed", "strategies", "output_dir"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- materialization ----------------------------------------------------

    def domains(self, seed: int | None = None) -> list[Domain]:
        seed = self.seed if seed is None else seed
        out = []
        for entry in self.stream:
            if isinstance(entry, DomainSpec):
                out.append(gen_synthetic_domain(entry, seed))
            else:
                out.append(entry.load(Path(self.base_dir)))
        if out[0].train is None:
            raise DataError("the first domain needs a train split")
        return out
