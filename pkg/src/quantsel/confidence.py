"""Confidence estimators: intrinsic MaxProb and the extrinsic Selector.

The Selector is a two-layer perceptron over ``[v ‖ q ‖ o1 ‖ p]`` (standardized
with training-split statistics), tanh hidden layer, logistic output,
trained by mini-batch Adam on squared error against soft-accuracy targets.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericalError, ValidationError
from .model import FeatureVector, Generation
from .optim import Adam

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


def maxprob(g: Generation | list[float] | tuple[float, ...]) -> float:
    """Joint probability of all generated tokens, accumulated in log space."""
    probs = g.step_probs if isinstance(g, Generation) else g
    if len(probs) == 0:
        raise ValidationError("maxprob of an empty generation")
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs <= 0) or np.any(probs > 1):
        raise ValidationError("step probabilities must lie in (0, 1]")
    # fsum is exactly rounded, so a step of probability 1 leaves the result unchanged
    return math.exp(math.fsum(np.log(probs)))


@dataclass(frozen=True)
class SelectorTrainConfig:
    epochs: int = 200
    learning_rate: float = 3e-3
    batch_size: int = 32
    seed: int = 0
    hidden: int = 64
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        for name in ("learning_rate", "batch_size", "hidden"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(eq=False)
class SelectorModel:
    w1: np.ndarray  # (hidden, n_in)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.w1.ndim != 2 or self.w1.shape[0] < 1:
            raise ValidationError("selector needs at least one hidden unit")
        n = self.w1.shape[1]
        if self.b1.shape != (self.w1.shape[0],) or self.w2.shape != (self.w1.shape[0],):
            raise ValidationError("selector layer shapes do not match")
        if self.mean.shape != (n,) or self.std.shape != (n,):
            raise ValidationError("normalization statistics do not match the input width")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std)) and np.all(self.std > 0)):
            raise ValidationError("normalization statistics must be finite with positive std")

    @property
    def n_in(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": np.atleast_1d(self.b2)}

    def copy(self) -> "SelectorModel":
        return SelectorModel(self.w1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2),
                             self.mean.copy(), self.std.copy())

    # forward/backward on raw feature matrices

    def _prep(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ValidationError(f"feature width {x.shape[1]} != selector input width {self.n_in}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("non-finite feature value")
        return x

    def predict_array(self, x) -> np.ndarray:
        xn = (self._prep(x) - self.mean) / self.std
        h = np.tanh(xn @ self.w1.T + self.b1)
        return _sigmoid(h @ self.w2 + self.b2)

    def input_gradient(self, x) -> np.ndarray:
        """d prediction / d raw features, one row per input."""
        xn = (self._prep(x) - self.mean) / self.std
        h = np.tanh(xn @ self.w1.T + self.b1)
        y = _sigmoid(h @ self.w2 + self.b2)
        dz = (y * (1 - y))[:, None] * self.w2[None, :] * (1 - h * h)
        return (dz @ self.w1) / self.std

    def loss_and_grads(self, x, target):
        """Mean squared error and its parameter gradients."""
        x = self._prep(x)
        t = np.asarray(target, dtype=np.float64).reshape(-1)
        xn = (x - self.mean) / self.std
        h = np.tanh(xn @ self.w1.T + self.b1)
        y = _sigmoid(h @ self.w2 + self.b2)
        n = len(t)
        r = y - t
        loss = float(np.mean(r * r))
        dy = 2.0 * r / n
        dz2 = dy * y * (1 - y)
        g = {"w2": h.T @ dz2, "b2": np.array([dz2.sum()])}
        dh = dz2[:, None] * self.w2[None, :] * (1 - h * h)
        g["w1"] = dh.T @ xn
        g["b1"] = dh.sum(axis=0)
        return loss, g

    # serialization: float64 values as repr strings round-trip exactly

    def to_json(self, extra: dict | None = None) -> str:
        enc = lambda a: [repr(float(v)) for v in np.asarray(a).reshape(-1)]  # noqa: E731
        doc = {
            "n_in": self.n_in,
            "hidden": self.hidden,
            "activation": "tanh",
            "output": "logistic",
            "mean": enc(self.mean),
            "std": enc(self.std),
            "w1": enc(self.w1),
            "b1": enc(self.b1),
            "w2": enc(self.w2),
            "b2": repr(float(self.b2)),
        }
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SelectorModel":
        d = json.loads(text)
        dec = lambda k: np.array([float(v) for v in d[k]], dtype=np.float64)  # noqa: E731
        n, h = int(d["n_in"]), int(d["hidden"])
        return cls(dec("w1").reshape(h, n), dec("b1"), dec("w2"), float(d["b2"]), dec("mean"), dec("std"))

    def save(self, path, extra: dict | None = None) -> None:
        Path(path).write_text(self.to_json(extra) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SelectorModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def selector_predict(model: SelectorModel, f: FeatureVector | np.ndarray) -> float:
    """Correctness likelihood in [0, 1] for one feature vector."""
    x = f.as_array() if isinstance(f, FeatureVector) else f
    return float(model.predict_array(x)[0])


def init_selector(n_in: int, hidden: int, seed: int, mean=None, std=None) -> SelectorModel:
    rng = np.random.default_rng(seed)
    return SelectorModel(
        w1=rng.normal(0.0, 1.0 / math.sqrt(n_in), (hidden, n_in)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, 1.0 / math.sqrt(hidden), hidden),
        b2=0.0,
        mean=np.zeros(n_in) if mean is None else np.asarray(mean, dtype=np.float64),
        std=np.ones(n_in) if std is None else np.asarray(std, dtype=np.float64),
    )


def _as_xy(records):
    xs, ys = [], []
    for r in records:
        f = r.features if hasattr(r, "features") else r[0]
        t = r.soft_acc if hasattr(r, "soft_acc") else r[1]
        if f is None:
            raise ValidationError(f"record {getattr(r, 'id', '?')} has no features")
        xs.append(f.as_array() if isinstance(f, FeatureVector) else np.asarray(f, dtype=np.float64))
        ys.append(float(t))
    return np.array(xs), np.array(ys)


def holdout_split(n: int, seed: int, fraction: float = 0.1):
    """Seeded (train_idx, holdout_idx) with ``max(1, round(fraction*n))`` held out."""
    perm = np.random.default_rng([seed, 1]).permutation(n)
    k = max(1, int(round(fraction * n)))
    return np.sort(perm[k:]), np.sort(perm[:k])


def selector_train(records, cfg: SelectorTrainConfig) -> SelectorModel:
    """Fit a Selector on ``records`` (objects with ``features``/``soft_acc``, or pairs).

    10% of the records are held out (seeded); the returned parameters are those
    of the epoch with the lowest held-out MSE, the initial model included.
    """
    x, y = _as_xy(records)
    if len(y) < 2:
        raise ValidationError("selector training needs at least two records")
    bad = np.flatnonzero((y < 0) | (y > 1) | ~np.isfinite(y))
    if bad.size:
        raise ValidationError(f"soft-accuracy target {y[bad[0]]} at index {int(bad[0])} outside [0, 1]")
    tr, ho = holdout_split(len(y), cfg.seed)
    xt, yt = x[tr], y[tr]
    if np.all(xt == xt[0]) and np.ptp(yt) > 0:
        warnings.warn("identical features with differing targets: irreducible error", RuntimeWarning, stacklevel=2)
    mean = xt.mean(axis=0)
    std = np.maximum(xt.std(axis=0), STD_FLOOR)
    model = init_selector(x.shape[1], cfg.hidden, cfg.seed, mean, std)
    if cfg.epochs == 0:
        return model
    params = {"w1": model.w1, "b1": model.b1, "w2": model.w2, "b2": np.array([model.b2])}
    opt = Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 2])

    def current():
        return SelectorModel(params["w1"], params["b1"], params["w2"], float(params["b2"][0]), mean, std)

    def heldout_mse(m):
        r = m.predict_array(x[ho]) - y[ho]
        return float(np.mean(r * r))

    best_mse, best = heldout_mse(model), model.copy()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(yt))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = current().loss_and_grads(xt[idx], yt[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"selector loss became non-finite in epoch {epoch}")
            opt.step(g)
        mse = heldout_mse(current())
        if mse < best_mse:
            best_mse, best = mse, current().copy()
    logger.info("selector: best held-out MSE %.5f", best_mse)
    return best
