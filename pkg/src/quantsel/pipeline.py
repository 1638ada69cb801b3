"""End-to-end orchestration: quant labels, model checkpoints, evaluation, manifests."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .confidence import SelectorModel, maxprob, selector_predict
from .errors import ValidationError
from .mbq import DEFAULT_GRID, CalibBatch, mbq_plans
from .metrics import soft_accuracy
from .model import (
    Model, ModelConfig, forward, greedy_decode_batch, kl_divergence_logits,
    model_from_quantized, quantize_weights,
)
from .records import PredictionRecord
from .task import EOS, MAX_NEW, Sample, answer_text
from .tensor_quant import Method, QuantizedTensor, QuantSpec

FP_LABEL = "bf16"
TABLE_LABELS = ("bf16", "int8_HQQ", "int8_MBQ", "int4_HQQ", "int4_MBQ", "int3_HQQ", "int3_MBQ")
_LABEL_RE = re.compile(r"^int(3|4|8)_(RTN|HQQ|MBQ)$")
CONFIG_TENSOR = "__config__"
EQ_SUFFIX = ".eq_scale"


def parse_label(label: str) -> tuple[int, Method] | None:
    """``"int4_MBQ" -> (4, Method.MBQ)``; ``"bf16" -> None`` (full precision)."""
    if label == FP_LABEL:
        return None
    m = _LABEL_RE.match(label)
    if not m:
        raise ValidationError(f"bad quant label {label!r}; expected bf16 or int<3|4|8>_<RTN|HQQ|MBQ>")
    return int(m.group(1)), Method(m.group(2))


def make_label(bits: int, method: Method | str) -> str:
    return f"int{bits}_{Method(method).value}"


def spec_for_label(label: str, group_size: int = 64, lp_norm: float = 0.7, hqq_iters: int = 20) -> QuantSpec | None:
    parsed = parse_label(label)
    if parsed is None:
        return None
    bits, method = parsed
    return QuantSpec(bits=bits, group_size=group_size, method=method, lp_norm=lp_norm, hqq_iters=hqq_iters)


# --- checkpoints ------------------------------------------------------------------


def model_tensors(model: Model, qweights: dict | None = None) -> dict:
    """SQNT tensor dict: config row, then parameters in sorted order.

    Linear weights present in ``qweights`` are stored quantized, each followed
    by its equalization scales when a plan was used.
    """
    out: dict = {CONFIG_TENSOR: np.array(model.cfg.as_tuple(), dtype=np.float64)}
    qweights = qweights or {}
    for name in sorted(model.params):
        if name in qweights:
            qt, s = qweights[name]
            out[name] = qt
            if s is not None:
                out[name + EQ_SUFFIX] = np.asarray(s, dtype=np.float64)
        else:
            out[name] = model.params[name]
    return out


def save_model(path, model: Model, qweights: dict | None = None) -> int:
    return checkpoint.save(path, model_tensors(model, qweights))


def load_model(path) -> Model:
    """Load a full-precision or quantized SQNT model (weights dequantized)."""
    tensors = checkpoint.load(path)
    if CONFIG_TENSOR not in tensors:
        raise ValidationError(f"{path}: missing {CONFIG_TENSOR} tensor")
    cfg = ModelConfig(*(int(v) for v in tensors.pop(CONFIG_TENSOR).reshape(-1)))
    params, qweights = {}, {}
    for name, t in tensors.items():
        if name.endswith(EQ_SUFFIX):
            continue
        if isinstance(t, QuantizedTensor):
            s = tensors.get(name + EQ_SUFFIX)
            qweights[name] = (t, None if s is None else s.reshape(-1))
            params[name] = np.zeros(t.shape)
        else:
            params[name] = t.reshape(-1) if t.shape[0] == 1 and _is_vector(name) else t
    model = Model(cfg, params)
    return model_from_quantized(model, qweights) if qweights else model


def _is_vector(name: str) -> bool:
    return name.endswith((".g", ".b"))


def quantize_for_label(model: Model, label: str, calib: CalibBatch | None = None, *,
                       group_size: int = 64, lp_norm: float = 0.7, hqq_iters: int = 20,
                       exponent_grid=DEFAULT_GRID):
    """Quantized weights for ``label``; MBQ needs a calibration batch.

    Returns ``(qweights or None, info)``.
    """
    spec = spec_for_label(label, group_size, lp_norm, hqq_iters)
    if spec is None:
        return None, {}
    info: dict = {}
    plans = None
    if spec.method is Method.MBQ:
        if calib is None:
            raise ValidationError("MBQ needs a calibration batch (pass --calib)")
        plans, mw = mbq_plans(model, calib, spec, exponent_grid)
        info["modality_weights"] = {"alpha_v": mw.alpha_v, "alpha_t": mw.alpha_t}
        info["exponents"] = {n: p.chosen_exponent for n, p in plans.items()}
        info["plans"] = plans
    return quantize_weights(model, spec, plans), info


def quantized_model(model: Model, label: str, calib: CalibBatch | None = None, **kw) -> Model:
    qweights, _ = quantize_for_label(model, label, calib, **kw)
    return model.copy() if qweights is None else model_from_quantized(model, qweights)


def storage_report(model: Model, qweights: dict) -> dict:
    """Byte accounting of the quantized linear weights against 16- and 32-bit baselines."""
    numel = sum(model.params[n].size for n in qweights)
    tensors = {n: qt for n, (qt, _) in qweights.items()}
    eq = {n + EQ_SUFFIX: s for n, (_, s) in qweights.items() if s is not None}
    quant_bytes = len(checkpoint.dumps(tensors)) - 10
    eq_bytes = len(checkpoint.dumps(eq)) - 10 if eq else 0
    return {
        "numel": int(numel),
        "quantized_bytes": quant_bytes,
        "equalization_bytes": eq_bytes,
        "fp16_bytes": 2 * numel,
        "fp32_bytes": 4 * numel,
        "ratio_vs_fp16": quant_bytes / (2 * numel),
        "ratio_vs_fp32": quant_bytes / (4 * numel),
    }


# --- evaluation -------------------------------------------------------------------


def evaluate(model: Model, samples: list[Sample], manifest: str | None = None) -> tuple[list[PredictionRecord], list]:
    """Greedy-decode every sample; records carry MaxProb confidence and features."""
    gens = greedy_decode_batch(model, [s.mm_input for s in samples], MAX_NEW, EOS)
    records = []
    for s, g in zip(samples, gens):
        ans = answer_text(g.answer_tokens)
        records.append(PredictionRecord(
            id=s.id,
            confidence=maxprob(g),
            soft_acc=soft_accuracy(ans, s.refs),
            split=s.split,
            source=s.source,
            features=g.features,
            answer=ans,
            refs=tuple(s.refs),
            manifest=manifest,
        ))
    return records, gens


def rescore(records: list[PredictionRecord], selector: SelectorModel) -> list[PredictionRecord]:
    """Replace confidences by Selector predictions; ids and soft_acc are kept."""
    out = []
    for r in records:
        if r.features is None:
            raise ValidationError(f"record {r.id} has no features to rescore")
        out.append(r.with_confidence(selector_predict(selector, r.features)))
    return out


def fit_split(records, fraction: float):
    """First ``ceil(fraction * n)`` records fit the Selector; the rest stay held out."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError("selector fraction must lie in (0, 1]")
    k = int(math.ceil(fraction * len(records) - 1e-9))
    return records[:k], records[k:]


def probe_kl(ref: Model, other: Model, samples: list[Sample]) -> float:
    """Mean KL(ref || other) over answer positions of ref's own greedy outputs."""
    gens = greedy_decode_batch(ref, [s.mm_input for s in samples], MAX_NEW, EOS)
    seqs = []
    for s, g in zip(samples, gens):
        ans = list(g.answer_tokens) + [EOS] * (MAX_NEW - len(g.answer_tokens))
        seqs.append(list(s.mm_input.prompt) + ans[: MAX_NEW - 1])
    by_len: dict[int, list] = {}
    for sq in seqs:
        by_len.setdefault(len(sq), []).append(sq)
    total, count = 0.0, 0
    for n in sorted(by_len):
        toks = np.array(by_len[n])
        mask = np.zeros(toks.shape, dtype=bool)
        mask[:, n - MAX_NEW:] = True
        kl = kl_divergence_logits(forward(ref, toks), forward(other, toks), mask)
        total += kl * mask.sum()
        count += int(mask.sum())
    return total / count


# --- manifests --------------------------------------------------------------------


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    """Provenance of a quantized run. Paths are recorded but not hashed."""

    model_checkpoint: str
    model_sha256: str
    quant_label: str
    spec: dict
    calibration: str | None
    calibration_sha256: str | None
    seed: int
    output_dir: str
    tool_version: str = __version__
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        parse_label(self.quant_label)

    def hashed_fields(self) -> dict:
        return {
            "model_sha256": self.model_sha256,
            "quant_label": self.quant_label,
            "spec": self.spec,
            "calibration_sha256": self.calibration_sha256,
            "seed": self.seed,
            "tool_version": self.tool_version,
        }

    def digest(self) -> str:
        blob = json.dumps(self.hashed_fields(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def to_json(self) -> str:
        d = asdict(self)
        d["hash"] = self.digest()
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        d.pop("hash", None)
        return cls(**d)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))
