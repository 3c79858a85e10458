"""Config-driven experiments: pretraining, sequential adaptation and reporting.

A run is a pure function of its resolved :class:`ExperimentConfig`; the
resolved config is echoed next to the outputs and re-runs to identical files.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapter import AdaptConfig, sequential_adapt
from .domains import Domain, DomainSequenceSpec, dataset_to_csv, make_sequence
from .errors import ConfigError
from .evaluation import FORMATS, EvalReport, accuracy, accuracy_matrix, build_report, render_report
from .model import (Classifier, MlpConfig, PretrainConfig, init_classifier, load_checkpoint, pretrain,
                    save_checkpoint)

CONFIG_KEYS = ("sequence", "model", "pretrain", "adapt", "eval", "output_dir", "seed")


@dataclass
class ModelSpec:
    hidden_sizes: list[int] = field(default_factory=lambda: [32, 32])
    batchnorm_after_hidden: list[bool] | None = None
    bn_eps: float = 1e-5
    # optional path to a source checkpoint; skips pretraining when set
    load_from: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        _reject_unknown(d, cls, "model")
        return cls(**d)

    def build(self, input_dim: int, n_classes: int, seed: int) -> MlpConfig:
        return MlpConfig([input_dim, *self.hidden_sizes, n_classes], self.batchnorm_after_hidden,
                         self.bn_eps, init_seed=seed)


@dataclass
class EvalOptions:
    formats: list[str] = field(default_factory=lambda: list(FORMATS))
    log_accuracy: bool = True

    def __post_init__(self):
        bad = set(self.formats) - set(FORMATS)
        if bad:
            raise ConfigError(f"unknown report formats {sorted(bad)}; choose from {FORMATS}")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalOptions":
        _reject_unknown(d, cls, "eval")
        return cls(**d)


def _reject_unknown(d, cls, section):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    sequence: DomainSequenceSpec = field(default_factory=DomainSequenceSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    output_dir: str = "cosda_out"
    seed: int = 0

    def __post_init__(self):
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int):
        """The top-level seed is authoritative for every random stream."""
        self.seed = int(seed)
        self.sequence.seed = self.seed
        self.adapt.seed = self.seed

    def to_dict(self) -> dict:
        return {
            "sequence": self.sequence.to_dict(),
            "model": asdict(self.model),
            "pretrain": asdict(self.pretrain),
            "adapt": self.adapt.to_dict(),
            "eval": asdict(self.eval),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(d) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        try:
            return cls(
                sequence=DomainSequenceSpec.from_dict(d.get("sequence", {})),
                model=ModelSpec.from_dict(d.get("model", {})),
                pretrain=PretrainConfig.from_dict(d.get("pretrain", {})),
                adapt=AdaptConfig.from_dict(d.get("adapt", {})),
                eval=EvalOptions.from_dict(d.get("eval", {})),
                output_dir=str(d.get("output_dir", "cosda_out")),
                seed=int(d.get("seed", 0)),
            )
        except TypeError as exc:  # wrong value types inside a section
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        return cls.from_dict(data)

    def report_echo(self) -> dict:
        # the output location does not influence results, so it stays out of report.json
        d = self.to_dict()
        d.pop("output_dir")
        return d


@dataclass
class RunResult:
    report: EvalReport
    checkpoints: list[Classifier]
    source_model: Classifier
    logs_jsonl: str


def build_source_model(config: ExperimentConfig, source: Domain) -> tuple[Classifier, list[float]]:
    if config.model.load_from:
        model = load_checkpoint(config.model.load_from).eval()
        if model.config.input_dim != source.train.dim:
            raise ConfigError(f"checkpoint input width {model.config.input_dim} does not match data width "
                              f"{source.train.dim}")
        return model, []
    mcfg = config.model.build(source.train.dim, source.train.n_classes, config.seed)
    model = init_classifier(mcfg)
    history = pretrain(model, source.train.features, source.train.labels, config.pretrain,
                       np.random.default_rng([config.seed, 1]))
    return model, history


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Pretrain (or load), adapt through the targets, evaluate every checkpoint."""
    source, targets = make_sequence(config.sequence)
    model, _ = build_source_model(config, source)
    source_before = accuracy(model, source.test)
    checkpoints, logs = sequential_adapt(model, [t.train for t in targets], config.adapt,
                                         log_accuracy=config.eval.log_accuracy)
    matrix = accuracy_matrix(checkpoints, [t.test for t in targets], source.test)
    report = build_report(matrix, config.report_echo(), config.seed, source_before)
    return RunResult(report, checkpoints, model, "".join(log.to_jsonl() for log in logs))


def write_run(result: RunResult, config: ExperimentConfig, out_dir) -> list[Path]:
    """Write every run artifact atomically; nothing lands in ``out_dir`` on failure."""
    with staged_output(out_dir) as tmp:
        render_report(result.report, tmp, config.eval.formats)
        (tmp / "logs.jsonl").write_text(result.logs_jsonl)
        (tmp / "config.json").write_text(config.to_json())
        save_checkpoint(result.source_model, tmp / "checkpoints" / "source.npz")
        names = result.report.matrix.domain_names
        for k, ck in enumerate(result.checkpoints):
            save_checkpoint(ck, tmp / "checkpoints" / f"after_{k + 1}_{names[k]}.npz")
    return sorted(Path(out_dir).rglob("*"))


class staged_output:
    """Build files in a sibling temp dir, then move them into place on success."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)

    def __enter__(self) -> Path:
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(dir=self.out_dir.parent, prefix=f".{self.out_dir.name}."))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for src in sorted(self.tmp.rglob("*")):
                    if src.is_file():
                        dst = self.out_dir / src.relative_to(self.tmp)
                        dst.parent.mkdir(parents=True, exist_ok=True)
                        os.replace(src, dst)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def write_dataset_files(spec: DomainSequenceSpec, out_dir) -> list[tuple[Path, int]]:
    """Save the source and every target domain as CSV; returns ``(path, rows)`` pairs."""
    source, targets = make_sequence(spec)
    written = []
    with staged_output(out_dir) as tmp:
        for k, dom in enumerate([source, *targets]):
            name = f"domain_{k}_{dom.name}.csv"
            (tmp / name).write_text(dataset_to_csv(dom.full))
            written.append((Path(out_dir) / name, len(dom.full)))
    return written


def write_pretrain(config: ExperimentConfig, out_dir) -> tuple[float, list[float]]:
    source, _ = make_sequence(config.sequence)
    model, history = build_source_model(config, source)
    acc = accuracy(model, source.test)
    with staged_output(out_dir) as tmp:
        save_checkpoint(model, tmp / "source.npz")
        lines = [json.dumps({"epoch": e + 1, "loss": loss}, sort_keys=True) for e, loss in enumerate(history)]
        lines.append(json.dumps({"source_test_accuracy": acc}, sort_keys=True))
        (tmp / "pretrain_log.jsonl").write_text("\n".join(lines) + "\n")
        (tmp / "config.json").write_text(config.to_json())
    return acc, history


__all__ = ["ExperimentConfig", "ModelSpec", "EvalOptions", "RunResult", "build_source_model",
           "run_experiment", "write_run", "write_dataset_files", "write_pretrain", "staged_output"]
