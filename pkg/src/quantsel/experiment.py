"""In-memory experiment: train the toy decoder, quantize it per label, score both estimators.

This is the same computation as chaining the CLI commands, without the files.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .confidence import SelectorTrainConfig, selector_train
from .errors import ValidationError
from .mbq import DEFAULT_CALIB_SIZE, CalibBatch
from .metrics import ReliabilityReport, reliability_report
from .model import Model, ModelConfig, init_model, model_from_quantized
from .pipeline import FP_LABEL, TABLE_LABELS, evaluate, fit_split, probe_kl, quantize_for_label, rescore
from .task import TaskConfig, calibration_batch, generate, pretraining_corpus
from .training import train_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_samples: int = 2000
    noise_rate: float = 0.2
    train_steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 3e-3
    labels: tuple[str, ...] = TABLE_LABELS
    group_size: int = 64
    calib_size: int = DEFAULT_CALIB_SIZE
    selector_fraction: float = 0.5
    selector: SelectorTrainConfig = field(default_factory=SelectorTrainConfig)
    model: ModelConfig | None = None

    def __post_init__(self):
        # the Selector's fit part and the threshold part of dev must both be non-empty
        if not 0.0 < self.selector_fraction < 1.0:
            raise ValidationError("selector_fraction must lie in (0, 1)")


@dataclass
class LabelResult:
    label: str
    kl: float
    maxprob: ReliabilityReport
    selector: ReliabilityReport | None


def trained_model(cfg: ExperimentConfig) -> Model:
    mcfg = cfg.model or ModelConfig(seed=cfg.seed)
    model = init_model(mcfg)
    corpus = pretraining_corpus(cfg.seed, cfg.train_steps * cfg.batch_size)
    train_model(model, corpus, cfg.train_steps, cfg.batch_size, cfg.learning_rate, cfg.seed)
    return model


def run(cfg: ExperimentConfig, model: Model | None = None, with_selector: bool = True) -> dict[str, LabelResult]:
    samples = generate(TaskConfig(seed=cfg.seed, n_samples=cfg.n_samples, noise_rate=cfg.noise_rate))
    model = model if model is not None else trained_model(cfg)
    calib = CalibBatch.from_records(calibration_batch(samples, cfg.calib_size))
    dev = [s for s in samples if s.split == "dev"]
    test = [s for s in samples if s.split == "test"]
    sel_cfg = SelectorTrainConfig(**{**cfg.selector.__dict__, "seed": cfg.seed})
    out = {}
    for label in cfg.labels:
        qweights, _ = quantize_for_label(model, label, calib, group_size=cfg.group_size)
        qm = model if qweights is None else model_from_quantized(model, qweights)
        rec_dev, _ = evaluate(qm, dev)
        rec_test, _ = evaluate(qm, test)
        fit, thresh = fit_split(rec_dev, cfg.selector_fraction)
        kl = 0.0 if label == FP_LABEL else probe_kl(model, qm, test)
        mp = reliability_report(rec_test, thresh, label)
        sel = None
        if with_selector:
            selector = selector_train(fit, sel_cfg)
            sel = reliability_report(rescore(rec_test, selector), rescore(thresh, selector), label)
        out[label] = LabelResult(label, kl, mp, sel)
        logger.info("seed %d %s: kl %.5f auc %.4f", cfg.seed, label, kl, mp.rc_auc)
    return out
