"""Prediction records and their line-delimited JSON files."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ValidationError
from .model import FeatureVector

SPLITS = ("train", "dev", "test")
SOURCES = ("ID", "OOD_A", "OOD_B")


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    confidence: float
    soft_acc: float
    split: str = "test"
    source: str = "ID"
    features: FeatureVector | None = None
    answer: str | None = None
    refs: tuple[str, ...] | None = None
    manifest: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"record {self.id}: confidence {self.confidence} outside [0, 1]")
        if not 0.0 <= self.soft_acc <= 1.0:
            raise ValidationError(f"record {self.id}: soft_acc {self.soft_acc} outside [0, 1]")
        if self.split not in SPLITS:
            raise ValidationError(f"record {self.id}: unknown split {self.split!r}")
        if self.source not in SOURCES:
            raise ValidationError(f"record {self.id}: unknown source {self.source!r}")

    def with_confidence(self, confidence: float) -> "PredictionRecord":
        return replace(self, confidence=float(confidence))

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "confidence": self.confidence,
            "soft_acc": self.soft_acc,
            "split": self.split,
            "source": self.source,
        }
        if self.features is not None:
            d["features"] = self.features.to_dict()
        if self.answer is not None:
            d["answer"] = self.answer
        if self.refs is not None:
            d["refs"] = list(self.refs)
        if self.manifest is not None:
            d["manifest"] = self.manifest
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        try:
            return cls(
                id=str(d["id"]),
                confidence=float(d["confidence"]),
                soft_acc=float(d["soft_acc"]),
                split=d.get("split", "test"),
                source=d.get("source", "ID"),
                features=FeatureVector.from_dict(d["features"]) if d.get("features") else None,
                answer=d.get("answer"),
                refs=tuple(d["refs"]) if d.get("refs") is not None else None,
                manifest=d.get("manifest"),
            )
        except KeyError as exc:
            raise ValidationError(f"record is missing field {exc}") from None


def check_unique(records) -> None:
    seen = set()
    for r in records:
        if r.id in seen:
            raise ValidationError(f"duplicate record id {r.id!r}")
        seen.add(r.id)


def dumps(records) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def write(path, records) -> None:
    records = list(records)
    check_unique(records)
    Path(path).write_text(dumps(records), encoding="utf-8")


def read(path) -> list[PredictionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(PredictionRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{n}: invalid JSON ({exc})") from None
    check_unique(out)
    return out


def manifest_hashes(records) -> set[str]:
    return {r.manifest for r in records if r.manifest is not None}
