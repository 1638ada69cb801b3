"""Teacher-forced training of the toy decoder on task samples."""

from __future__ import annotations

import logging

import numpy as np

from .errors import ValidationError
from .model import Model, backprop
from .optim import Adam

logger = logging.getLogger(__name__)


def answer_batch(samples):
    """Token matrix plus targets/mask that supervise only the answer tokens."""
    tokens = np.array([s.tokens for s in samples], dtype=np.int64)
    n_prompt = len(samples[0].vision) + len(samples[0].question)
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    mask = np.zeros(tokens.shape, dtype=bool)
    mask[:, n_prompt - 1:-1] = True
    return tokens, targets, mask


def train_model(model: Model, samples, steps: int = 1500, batch_size: int = 64,
                lr: float = 3e-3, seed: int = 0) -> list[float]:
    """Adam on summed answer cross-entropy; updates ``model`` in place.

    Returns the per-step mean loss per answer token. Single-writer: do not
    share ``model`` with concurrent readers while training.
    """
    samples = list(samples)
    if steps and not samples:
        raise ValidationError("no samples to train on")
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr=lr)
    history = []
    order = rng.permutation(len(samples))
    pos = 0
    for step in range(steps):
        if pos + batch_size > len(order):
            order = rng.permutation(len(samples))
            pos = 0
        batch = [samples[i] for i in order[pos:pos + batch_size]]
        pos += batch_size
        tokens, targets, mask = answer_batch(batch)
        loss, grads, _ = backprop(model, tokens, targets, mask)
        n = mask.sum()
        opt.lr = lr * min(1.0, (step + 1) / 100) * (0.5 * (1 + np.cos(np.pi * step / steps)))
        opt.step({k: g / n for k, g in grads.items()})
        history.append(loss / n)
        if step % 250 == 0:
            logger.info("step %d loss %.4f", step, loss / n)
    return history
