"""Run reports: per-sample records, online accuracy, and canonical digests.

Serialization is deliberately boring: fixed field order, plain repr floats,
no timestamps. Two runs with the same configuration must produce
byte-identical JSON, so the report digest doubles as a determinism check.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class SampleRecord:
    id: str
    gold: int
    gold_name: str
    predicted: int
    predicted_name: str
    correct: bool
    probs: list[float]
    loss_trace: list[dict]
    context_ids: list[str]
    context_labels: list[int | None]
    counters: dict
    theta_digest: str
    failed: bool = False
    failure: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "gold": self.gold,
            "gold_name": self.gold_name,
            "predicted": self.predicted,
            "predicted_name": self.predicted_name,
            "correct": self.correct,
            "probs": self.probs,
            "loss_trace": self.loss_trace,
            "context_ids": self.context_ids,
            "context_labels": self.context_labels,
            "counters": self.counters,
            "theta_digest": self.theta_digest,
            "failed": self.failed,
            "failure": self.failure,
        }


@dataclass
class RunReport:
    config: dict
    samples: list[SampleRecord] = field(default_factory=list)
    correct: int = 0
    total: int = 0
    weight_digest_before: str = ""
    weight_digest_after: str = ""
    theta_digest_before: str = ""
    theta_digest_after: str = ""
    counters: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.total if self.total else None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "counters": self.counters,
            "weight_digest_before": self.weight_digest_before,
            "weight_digest_after": self.weight_digest_after,
            "theta_digest_before": self.theta_digest_before,
            "theta_digest_after": self.theta_digest_after,
            "samples": [s.to_dict() for s in self.samples],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def summary_row(key: str, report: RunReport | dict) -> dict:
    """One CSV row per report: presentation-rounded accuracy, raw counts."""
    data = report.to_dict() if isinstance(report, RunReport) else report
    acc = data.get("accuracy")
    counters = data.get("counters", {})
    return {
        "cell": key,
        "accuracy": "" if acc is None else f"{acc:.4f}",
        "correct": data.get("correct", 0),
        "total": data.get("total", 0),
        "vision_calls": counters.get("vision_calls", 0),
        "text_calls": counters.get("text_calls", 0),
        "text_batches": counters.get("text_batches", 0),
        "weight_digest": data.get("weight_digest_after", ""),
    }


SUMMARY_FIELDS = [
    "cell", "accuracy", "correct", "total",
    "vision_calls", "text_calls", "text_batches", "weight_digest",
]
