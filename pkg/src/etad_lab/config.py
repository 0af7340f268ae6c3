"""Run configuration: nested dataclasses with JSON round-trip and collected validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .detector import DetectorConfig
from .encoder import EncoderConfig
from .sgs import ApsConfig, SgsConfig
from .synthdata import DatasetConfig
from .tadeval import DEFAULT_THRESHOLDS, InferenceConfig


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _tuples(cls, d):
    """Coerce JSON lists back into tuples for tuple-typed dataclass fields."""
    out = dict(d)
    defaults = cls()
    for f in fields(cls):
        if f.name in out and isinstance(getattr(defaults, f.name), tuple) and isinstance(out[f.name], list):
            out[f.name] = tuple(tuple(v) if isinstance(v, list) else v for v in out[f.name])
    return out


@dataclass
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    sgs: SgsConfig = field(default_factory=SgsConfig)
    aps: ApsConfig = field(default_factory=ApsConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    thresholds: tuple = DEFAULT_THRESHOLDS
    seed: int = 0
    eval_every: int = 1
    data_dir: str = "runs/data"
    out_dir: str = "runs/out"

    def validate(self):
        errors = []
        errors += self.data.validate()
        errors += self.encoder.validate()
        errors += self.detector.validate()
        errors += self.sgs.validate(self.data.length)
        errors += self.aps.validate()
        errors += self.inference.validate()
        if not self.thresholds or any(not 0 < t <= 1 for t in self.thresholds):
            errors.append("thresholds must be non-empty values in (0, 1]")
        if self.eval_every < 0:
            errors.append("eval_every must be >= 0")
        if self.encoder.out_dim != self.detector.feat_dim:
            errors.append(f"encoder.out_dim ({self.encoder.out_dim}) must equal detector.feat_dim "
                          f"({self.detector.feat_dim})")
        if self.encoder.frames != self.data.frames or self.encoder.frame_dim != self.data.frame_dim:
            errors.append("encoder frames/frame_dim must match the dataset's")
        return errors

    def check(self):
        errors = self.validate()
        if errors:
            raise ConfigError(errors)
        return self

    def to_dict(self):
        d = asdict(self)
        d["data"] = self.data.to_dict()
        d["thresholds"] = list(self.thresholds)
        for key in ("encoder", "detector"):
            d[key] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[key].items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        parts = {}
        try:
            parts["data"] = DatasetConfig.from_dict(d.get("data", {}))
            for key, sub in (("encoder", EncoderConfig), ("detector", DetectorConfig), ("sgs", SgsConfig),
                             ("aps", ApsConfig), ("inference", InferenceConfig)):
                parts[key] = sub(**_tuples(sub, d.get(key, {})))
        except TypeError as exc:
            raise ConfigError([str(exc)]) from None
        for key in ("seed", "eval_every", "data_dir", "out_dir"):
            if key in d:
                parts[key] = d[key]
        if "thresholds" in d:
            parts["thresholds"] = tuple(float(t) for t in d["thresholds"])
        return cls(**parts)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file {path} not found"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
        return cls.from_dict(raw)


