"""JSON run configuration.

A config file is one JSON object whose only allowed keys are the sections
``model``, ``task``, ``finetune``, ``decode``, ``similarity``, ``calibration``
and ``evaluate``.  Every section is optional and every key in it has a
default (the dataclass fields below); an unknown section or key is an error.

``--seed`` on the command line overrides the seed of every section.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .calibration import CalibrationConfig
from .decoding import DecodeConfig
from .metrics import SpanMatchConfig
from .model import ModelConfig
from .tasks import SyntheticTaskSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    eval_every: int = 250
    eval_examples: int = 200
    selection: str = "perplexity"
    label_smoothing: float = 0.0
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.selection not in ("perplexity", "rouge"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and eval_every >= 1 required")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")


@dataclass(frozen=True)
class CandidateSettings:
    """Which examples get candidate sets (the decoding itself is ``decode``)."""

    split: str = "train"
    max_examples: int | None = None


@dataclass(frozen=True)
class CalibrateRunConfig:
    steps: int = 300
    eval_every: int = 100
    val_examples: int = 100
    val_num_beams: int = 5
    tau_examples: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.eval_every < 1:
            raise ValueError("steps >= 0 and eval_every >= 1 required")
        if self.val_num_beams < 1 or self.tau_examples < 1:
            raise ValueError("val_num_beams and tau_examples must be >= 1")


@dataclass(frozen=True)
class EvaluateConfig:
    split: str = "test"
    alpha_split: str = "val"
    methods: tuple[str, ...] = ("beam", "nucleus")
    num_candidates: tuple[int, ...] = (1, 2, 5, 10, 20)
    alpha_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0)
    alpha_star: float | None = None
    alpha_select_candidates: int = 5
    max_examples: int | None = None
    nucleus_p: float = 0.9
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        for k in ("methods", "num_candidates", "alpha_grid"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        bad = [m for m in self.methods if m not in ("beam", "diverse_beam", "nucleus")]
        if bad:
            raise ValueError(f"unknown evaluation methods {bad}")
        if not self.num_candidates or min(self.num_candidates) < 1:
            raise ValueError("num_candidates must be non-empty and >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    candidates: CandidateSettings = field(default_factory=CandidateSettings)
    similarity: SpanMatchConfig = field(default_factory=SpanMatchConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    calibrate_run: CalibrateRunConfig = field(default_factory=CalibrateRunConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def with_seed(self, seed: int) -> RunConfig:
        rp = dataclasses.replace
        return RunConfig(
            model=self.model,
            task=rp(self.task, seed=seed),
            finetune=rp(self.finetune, seed=seed),
            decode=rp(self.decode, seed=seed),
            candidates=self.candidates,
            similarity=self.similarity,
            calibration=self.calibration,
            calibrate_run=rp(self.calibrate_run, seed=seed),
            evaluate=rp(self.evaluate, seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "model": _plain(self.model),
            "task": _plain(self.task),
            "finetune": _plain(self.finetune),
            "decode": {**_plain(self.decode), **_plain(self.candidates)},
            "similarity": _plain(self.similarity),
            "calibration": {**_plain(self.calibration), **_plain(self.calibrate_run)},
            "evaluate": _plain(self.evaluate),
        }


def _plain(obj) -> dict:
    d = dataclasses.asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, section: str, values: dict):
    unknown = set(values) - _fields(cls)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section {section!r}: {e}") from None


def _split(section: str, values: dict, *classes) -> list[dict]:
    known = set().union(*(_fields(c) for c in classes))
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {sorted(unknown)}")
    return [{k: v for k, v in values.items() if k in _fields(c)} for c in classes]


SECTIONS = ("model", "task", "finetune", "decode", "similarity", "calibration", "evaluate")


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    for name, val in raw.items():
        if not isinstance(val, dict):
            raise ConfigError(f"section {name!r} must be an object")
    dec, cand = _split("decode", raw.get("decode", {}), DecodeConfig, CandidateSettings)
    cal, run = _split("calibration", raw.get("calibration", {}), CalibrationConfig, CalibrateRunConfig)
    sim = dict(raw.get("similarity", {}))
    if "span_lengths" in sim:
        sim["span_lengths"] = tuple(sim["span_lengths"])
    return RunConfig(
        model=_build(ModelConfig, "model", raw.get("model", {})),
        task=_build(SyntheticTaskSpec, "task", raw.get("task", {})),
        finetune=_build(FinetuneConfig, "finetune", raw.get("finetune", {})),
        decode=_build(DecodeConfig, "decode", dec),
        candidates=_build(CandidateSettings, "decode", cand),
        similarity=_build(SpanMatchConfig, "similarity", sim),
        calibration=_build(CalibrationConfig, "calibration", cal),
        calibrate_run=_build(CalibrateRunConfig, "calibration", run),
        evaluate=_build(EvaluateConfig, "evaluate", raw.get("evaluate", {})),
    )


def load_config(path=None, seed: int | None = None) -> RunConfig:
    cfg = RunConfig() if path is None else from_dict(json.loads(Path(path).read_text()))
    return cfg.with_seed(seed) if seed is not None else cfg


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
