"""Modality-balanced, data-aware calibration.

Gradient magnitudes of the calibration loss with respect to vision and text
token embeddings give per-modality weights; each linear layer then gets a
per-input-channel equalization scale ``s_j = max_i |X[i, j]|^beta`` with
``beta`` picked from a grid to minimize the modality-weighted output
reconstruction error of the quantized, equalized layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .model import Model, backprop, forward_with_cache
from .tensor_quant import Method, QuantSpec, dequantize, quantize, rtn_quantize

DEFAULT_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_CALIB_SIZE = 128
SCALE_FLOOR = 1e-8
MODALITIES = ("v", "t")


@dataclass(frozen=True)
class CalibBatch:
    samples: tuple[tuple[tuple[int, ...], tuple[str, ...]], ...]

    def __post_init__(self):
        if not self.samples:
            raise ValidationError("calibration batch must contain at least one sequence")
        for i, (tokens, tags) in enumerate(self.samples):
            if len(tokens) != len(tags):
                raise ValidationError(f"sequence {i}: {len(tokens)} tokens but {len(tags)} modality tags")
            if len(tokens) < 2:
                raise ValidationError(f"sequence {i}: need at least two tokens for next-token loss")
            bad = set(tags) - set(MODALITIES)
            if bad:
                raise ValidationError(f"sequence {i}: unknown modality tags {sorted(bad)}")

    @property
    def size(self) -> int:
        return len(self.samples)

    @classmethod
    def from_records(cls, rows) -> "CalibBatch":
        return cls(tuple((tuple(int(t) for t in r["tokens"]), tuple(r["modality"])) for r in rows))

    @classmethod
    def load(cls, path) -> "CalibBatch":
        with open(path, encoding="utf-8") as fh:
            return cls.from_records(json.loads(line) for line in fh if line.strip())

    def dump(self, path) -> None:
        Path(path).write_text(
            "".join(json.dumps({"tokens": list(t), "modality": list(m)}) + "\n" for t, m in self.samples),
            encoding="utf-8",
        )

    def groups(self):
        """Sequences grouped by length in first-seen order: ``[(indices, tokens, tags)]``."""
        by_len: dict[int, list[int]] = {}
        for i, (t, _) in enumerate(self.samples):
            by_len.setdefault(len(t), []).append(i)
        for n in by_len:
            idx = by_len[n]
            tokens = np.array([self.samples[i][0] for i in idx], dtype=np.int64)
            tags = np.array([self.samples[i][1] for i in idx])
            yield idx, tokens, tags


@dataclass(frozen=True)
class ModalityWeights:
    alpha_v: float
    alpha_t: float

    def __post_init__(self):
        if self.alpha_v < 0 or self.alpha_t < 0 or self.alpha_v + self.alpha_t <= 0:
            raise ValidationError(f"invalid modality weights ({self.alpha_v}, {self.alpha_t})")

    def normalized(self) -> "ModalityWeights":
        total = self.alpha_v + self.alpha_t
        return ModalityWeights(self.alpha_v / total, self.alpha_t / total)

    def __getitem__(self, modality: str) -> float:
        return self.alpha_v if modality == "v" else self.alpha_t


@dataclass(frozen=True, eq=False)
class EqualizationPlan:
    per_channel_scales: np.ndarray
    chosen_exponent: float
    losses: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        s = np.asarray(self.per_channel_scales, dtype=np.float64)
        if s.ndim != 1 or not np.all(np.isfinite(s) & (s > 0)):
            raise ValidationError("equalization scales must be a vector of positive finite values")
        object.__setattr__(self, "per_channel_scales", s)


def modality_weights(model: Model, batch: CalibBatch) -> ModalityWeights:
    """Normalized mean per-token embedding-gradient norm for each modality.

    The loss is summed next-token cross-entropy over each calibration
    sequence. A modality with no tokens gets weight 0. Accumulation follows
    the batch order, so results are reproducible bit-for-bit.
    """
    per_seq: list = [None] * batch.size
    for idx, tokens, tags in batch.groups():
        _, _, dx = backprop(model, tokens)
        per_token = np.sqrt(np.sum(dx * dx, axis=-1))
        for row, i in enumerate(idx):
            per_seq[i] = (per_token[row], tags[row])
    sums = {m: 0.0 for m in MODALITIES}
    counts = {m: 0 for m in MODALITIES}
    for vals, tags in per_seq:
        for val, tag in zip(vals, tags):
            sums[str(tag)] += float(val)
            counts[str(tag)] += 1
    alpha = {m: (sums[m] / counts[m] if counts[m] else 0.0) for m in MODALITIES}
    if alpha["v"] + alpha["t"] <= 0:
        raise ValidationError("both modality gradient magnitudes are zero")
    return ModalityWeights(alpha["v"], alpha["t"]).normalized()


def collect_activations(model: Model, batch: CalibBatch) -> dict[str, dict[str, np.ndarray]]:
    """Inputs of every linear layer over the batch, split by token modality."""
    parts: dict[str, dict[str, list]] = {n: {m: [] for m in MODALITIES} for n in model.linear_names()}
    for _, tokens, tags in batch.groups():
        _, cache = forward_with_cache(model, tokens)
        for name in model.linear_names():
            x = cache["inputs"][name]
            for m in MODALITIES:
                parts[name][m].append(x[tags == m])
    d_in = {n: model.params[n].shape[1] for n in model.linear_names()}
    return {
        n: {m: (np.concatenate(v) if v else np.zeros((0, d_in[n]))) for m, v in mods.items()}
        for n, mods in parts.items()
    }


def _base_quantize(w, spec: QuantSpec):
    if spec.method is Method.HQQ:
        return quantize(w, spec)
    return rtn_quantize(w, spec)


def apply_equalization(weights, plan: EqualizationPlan) -> np.ndarray:
    """Scale input channel ``j`` (column ``j`` of an out x in matrix) by ``s_j``."""
    w = np.asarray(weights, dtype=np.float64)
    s = _plan_scales(plan, w.shape[1])
    return w * s[None, :]


def fold_inverse(input_activations, plan: EqualizationPlan) -> np.ndarray:
    """Divide activation channel ``j`` by ``s_j`` so the layer output is unchanged."""
    x = np.asarray(input_activations, dtype=np.float64)
    s = _plan_scales(plan, x.shape[-1])
    return x / s


def _plan_scales(plan: EqualizationPlan, n: int) -> np.ndarray:
    s = np.asarray(plan.per_channel_scales, dtype=np.float64)
    if s.shape != (n,):
        raise ValidationError(f"plan has {s.shape[0]} scales, expected {n}")
    if not np.all(s > 0):
        raise ValidationError("equalization scales must be strictly positive")
    return s


def equalization_loss(weights, calib_acts: dict, mw: ModalityWeights, scales, spec: QuantSpec | None) -> float:
    """Modality-weighted squared Frobenius error of the quantized, equalized layer."""
    w = np.asarray(weights, dtype=np.float64)
    plan = EqualizationPlan(np.asarray(scales, dtype=np.float64), 0.0)
    ws = apply_equalization(w, plan)
    wq = ws if spec is None else dequantize(_base_quantize(ws, spec))
    total = 0.0
    for m in MODALITIES:
        x = calib_acts.get(m)
        if x is None or len(x) == 0:
            continue
        diff = x @ w.T - fold_inverse(x, plan) @ wq.T
        total += mw[m] * float(np.sum(diff * diff))
    return total


def search_equalization(weights, calib_acts: dict, mw: ModalityWeights, spec: QuantSpec | None,
                        exponent_grid=DEFAULT_GRID) -> EqualizationPlan:
    """Grid search over the max-abs exponent; ties go to the smaller exponent."""
    w = np.asarray(weights, dtype=np.float64)
    grid = sorted(float(b) for b in exponent_grid)
    if not grid:
        raise ValidationError("exponent grid must be non-empty")
    mats = [np.asarray(calib_acts[m], dtype=np.float64) for m in MODALITIES if m in calib_acts]
    for x in mats:
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ValidationError(
                f"activation shape {x.shape} does not match {w.shape[1]} input channels"
            )
        if not np.all(np.isfinite(x)):
            raise ValidationError("non-finite calibration activations")
    stacked = np.concatenate(mats) if mats else np.zeros((0, w.shape[1]))
    amax = np.abs(stacked).max(axis=0) if len(stacked) else np.ones(w.shape[1])
    best = None
    losses = {}
    for beta in grid:
        s = np.maximum(amax**beta, SCALE_FLOOR)
        loss = equalization_loss(w, calib_acts, mw, s, spec)
        losses[beta] = loss
        if best is None or loss < best[0]:
            best = (loss, beta, s)
    return EqualizationPlan(best[2], best[1], losses)


def mbq_plans(model: Model, batch: CalibBatch, spec: QuantSpec, exponent_grid=DEFAULT_GRID):
    """Per-layer equalization plans for every linear layer of ``model``.

    All activations come from the full-precision model.
    """
    mw = modality_weights(model, batch)
    acts = collect_activations(model, batch)
    plans = {
        name: search_equalization(model.params[name], acts[name], mw, spec, exponent_grid)
        for name in model.linear_names()
    }
    return plans, mw
