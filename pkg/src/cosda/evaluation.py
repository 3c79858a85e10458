"""Accuracy matrix, backward transfer and report rendering.

Nothing here takes a domain identifier: every checkpoint is evaluated
with its global BatchNorm statistics only.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domains import LabeledDataset
from .errors import DataError, DimensionError, ProtocolError
from .model import Classifier, _atomic_write_bytes, forward

FORMATS = ("json", "markdown", "csv", "svg_heatmap")
REPORT_FILES = {"json": "report.json", "markdown": "report.md", "csv": "matrix.csv",
                "svg_heatmap": "heatmap.svg"}

# heatmap colour ramp: 0% -> RAMP_LOW, 100% -> RAMP_HIGH, undefined -> UNDEFINED_FILL
RAMP_LOW = (247, 251, 255)
RAMP_HIGH = (8, 48, 107)
UNDEFINED_FILL = "#bdbdbd"


def accuracy(model: Classifier, ds: LabeledDataset) -> float:
    """Percent of rows whose argmax prediction equals the label."""
    if len(ds) == 0:
        raise DataError("cannot score an empty dataset")
    if ds.dim != model.config.input_dim:
        raise DimensionError(f"dataset width {ds.dim} does not match model width {model.config.input_dim}")
    logits, _ = forward(model, ds.features, mode="eval")
    return 100.0 * int(np.sum(np.argmax(logits, axis=1) == ds.labels)) / len(ds)


@dataclass
class AccuracyMatrix:
    values: np.ndarray  # K x K, NaN where j < i
    domain_names: list[str]
    source_row: list[float] | None = None

    @property
    def k(self) -> int:
        return self.values.shape[0]

    def defined(self) -> np.ndarray:
        return np.triu(np.ones((self.k, self.k), dtype=bool))


def accuracy_matrix(checkpoints: Sequence[Classifier], domains: Sequence[LabeledDataset],
                    source: LabeledDataset | None = None) -> AccuracyMatrix:
    """R[i, j] = accuracy of checkpoint j on domain i, for j >= i."""
    if len(checkpoints) != len(domains):
        raise ProtocolError(f"{len(checkpoints)} checkpoints for {len(domains)} domains")
    k = len(domains)
    values = np.full((k, k), np.nan)
    for j, ck in enumerate(checkpoints):
        for i in range(j + 1):
            values[i, j] = accuracy(ck, domains[i])
    src = [accuracy(ck, source) for ck in checkpoints] if source is not None else None
    return AccuracyMatrix(values, [d.domain_name for d in domains], src)


def bwt(matrix: AccuracyMatrix) -> float:
    """Mean over earlier domains of (final accuracy - accuracy right after adapting)."""
    k = matrix.k
    if k < 2:
        raise ProtocolError("backward transfer needs at least 2 domains")
    r = matrix.values
    return float(sum(r[i, k - 1] - r[i, i] for i in range(k - 1)) / (k - 1))


def source_drop(acc_before: float, acc_after: float) -> float:
    return acc_before - acc_after


@dataclass
class EvalReport:
    matrix: AccuracyMatrix
    bwt: float | None
    source_drop: list[float]
    config: dict
    seed: int
    source_before: float | None = None

    def to_dict(self) -> dict:
        cells = [[None if math.isnan(v) else float(v) for v in row] for row in self.matrix.values]
        return {
            "domains": list(self.matrix.domain_names),
            "matrix": cells,
            "bwt": self.bwt,
            "source_drop": [float(v) for v in self.source_drop],
            "source_row": self.matrix.source_row,
            "source_before": self.source_before,
            "seed": int(self.seed),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        values = np.array([[np.nan if v is None else v for v in row] for row in d["matrix"]],
                          dtype=np.float64).reshape(len(d["domains"]), len(d["domains"]))
        return cls(AccuracyMatrix(values, d["domains"], d.get("source_row")), d["bwt"],
                   d["source_drop"], d["config"], d["seed"], d.get("source_before"))


def build_report(matrix: AccuracyMatrix, config: dict, seed: int,
                 source_before: float | None = None) -> EvalReport:
    b = bwt(matrix) if matrix.k >= 2 else None
    drops = []
    if source_before is not None and matrix.source_row is not None:
        drops = [source_drop(source_before, a) for a in matrix.source_row]
    return EvalReport(matrix, b, drops, config, seed, source_before)


# ----------------------------------------------------------- rendering

def _fmt(v: float) -> str:
    return "" if math.isnan(v) else f"{v:.2f}"


def render_markdown(report: EvalReport) -> str:
    m = report.matrix
    lines = ["| domain \\ after | " + " | ".join(m.domain_names) + " |",
             "|---" * (m.k + 1) + "|"]
    for i, name in enumerate(m.domain_names):
        lines.append(f"| {name} | " + " | ".join(_fmt(v) or "-" for v in m.values[i]) + " |")
    if m.source_row is not None:
        lines.append("| source | " + " | ".join(f"{v:.2f}" for v in m.source_row) + " |")
    lines.append("")
    if report.bwt is not None:
        lines.append(f"BWT: {report.bwt:.2f}")
    if report.source_drop:
        lines.append("Source drop: " + ", ".join(f"{v:.2f}" for v in report.source_drop))
    return "\n".join(lines) + "\n"


def render_csv(report: EvalReport) -> str:
    m = report.matrix
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain"] + list(m.domain_names))
    for i, name in enumerate(m.domain_names):
        w.writerow([name] + [_fmt(v) for v in m.values[i]])
    return buf.getvalue()


def ramp_color(value: float) -> str:
    t = min(max(value / 100.0, 0.0), 1.0)
    rgb = [round(lo + t * (hi - lo)) for lo, hi in zip(RAMP_LOW, RAMP_HIGH)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_svg(report: EvalReport, cell: int = 60) -> str:
    m = report.matrix
    pad = 110
    w = pad + cell * m.k + 10
    h = pad + cell * m.k + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'font-family="sans-serif" font-size="11">']
    for j, name in enumerate(m.domain_names):
        parts.append(f'<text x="{pad + j * cell + cell / 2}" y="{pad - 8}" text-anchor="middle">{name}</text>')
    for i, name in enumerate(m.domain_names):
        y = pad + i * cell
        parts.append(f'<text x="{pad - 6}" y="{y + cell / 2 + 4}" text-anchor="end">{name}</text>')
        for j in range(m.k):
            v = m.values[i, j]
            x = pad + j * cell
            fill = UNDEFINED_FILL if math.isnan(v) else ramp_color(v)
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#ffffff"/>')
            if not math.isnan(v):
                ink = "#ffffff" if v > 55 else "#000000"
                parts.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                             f'fill="{ink}">{v:.1f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


_RENDERERS = {"json": EvalReport.to_json, "markdown": render_markdown, "csv": render_csv,
              "svg_heatmap": render_svg}


def render_report(report: EvalReport, out_dir, formats: Sequence[str] = FORMATS) -> dict[str, Path]:
    out_dir = Path(out_dir)
    written = {}
    for fmt in formats:
        if fmt not in _RENDERERS:
            raise ValueError(f"unknown report format {fmt!r}; choose from {FORMATS}")
        path = out_dir / REPORT_FILES[fmt]
        _atomic_write_bytes(path, _RENDERERS[fmt](report).encode())
        written[fmt] = path
    return written
