"""Synthetic two-modality question-answering task.

Prompt layout (10 tokens)::

    BOS v1 v2 v3 v4 m SEP slot off SEP

``v1..v4`` are visual words (values 0..7), ``m`` is an image-quality marker
(CLEAR or BLUR), ``slot`` picks a visual position, ``off`` an offset. The
correct answer is two symbols followed by EOS::

    a1 = (v[slot] + off) % 8,   a2 = (v[(slot + 1) % 4] + off) % 8

The first six prompt tokens are vision-tagged, the rest text-tagged.

Every sample carries ten human-style reference answers. A sample is *noisy*
with probability ``2*noise_rate`` (capped at 1) when BLUR and
``max(0, 2*noise_rate - 1)`` when CLEAR; markers are drawn 50/50, so the
overall noise rate equals ``noise_rate``. In a noisy sample 8, 9 or 10 of the
references are replaced by one wrong answer, so the correct answer scores
2/3, 1/3 or 0. The marker therefore predicts correctness without affecting
the answer itself.

Shifted sources: ``OOD_A`` writes the slot token with an unseen synonym in
half the samples (linguistic shift); ``OOD_B`` replaces one visual word with
an unseen id and raises the BLUR rate to 3/4 (visual shift).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .model import MMInput

BOS, SEP, EOS, CLEAR, BLUR = 0, 1, 2, 3, 4
VISUAL0, N_VISUAL = 5, 8
SLOT0, OFF0 = 13, 17
ANSWER0, N_ANSWER = 21, 8
SLOT_SYN0 = 29
UNSEEN_VISUAL0 = 33
MIN_VOCAB = 37
N_VISION_TOKENS = 6  # BOS + four visual words + marker
MAX_NEW = 3
N_REFS = 10

SPLIT_FRACTIONS = (("train", 0.6), ("dev", 0.2), ("test", 0.2))


@dataclass(frozen=True)
class TaskConfig:
    seed: int = 0
    n_samples: int = 2000
    noise_rate: float = 0.2
    vocab_size: int = 40
    source: str = "ID"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValidationError("noise_rate must lie in [0, 1]")
        if self.vocab_size < MIN_VOCAB:
            raise ValidationError(f"vocab_size must be >= {MIN_VOCAB}")
        if self.source not in ("ID", "OOD_A", "OOD_B"):
            raise ValidationError(f"unknown source {self.source!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class Sample:
    id: str
    split: str
    source: str
    vision: tuple[int, ...]
    question: tuple[int, ...]
    answer: tuple[int, ...]
    refs: tuple[str, ...] = field(default=())

    @property
    def mm_input(self) -> MMInput:
        return MMInput(self.vision, self.question)

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.vision + self.question + self.answer

    @property
    def modality(self) -> tuple[str, ...]:
        return ("v",) * len(self.vision) + ("t",) * (len(self.question) + len(self.answer))

    def to_dict(self) -> dict:
        return {
            "id": self.id, "split": self.split, "source": self.source,
            "vision": list(self.vision), "question": list(self.question),
            "answer": list(self.answer), "refs": list(self.refs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        return cls(d["id"], d["split"], d["source"], tuple(d["vision"]), tuple(d["question"]),
                   tuple(d["answer"]), tuple(d["refs"]))


def answer_text(tokens) -> str:
    """Render answer tokens as text; EOS and non-answer ids are dropped or marked."""
    words = []
    for t in tokens:
        if t == EOS:
            break
        if ANSWER0 <= t < ANSWER0 + N_ANSWER:
            words.append(str(t - ANSWER0))
        else:
            words.append(f"<{t}>")
    return " ".join(words)


def _visual_value(tok: int) -> int:
    if VISUAL0 <= tok < VISUAL0 + N_VISUAL:
        return tok - VISUAL0
    # unseen visual ids stand for fixed values the model never saw
    return (3 * (tok - UNSEEN_VISUAL0) + 1) % N_VISUAL


def _slot_value(tok: int) -> int:
    return tok - SLOT0 if SLOT0 <= tok < SLOT0 + 4 else tok - SLOT_SYN0


def solve(vision, question) -> tuple[int, ...]:
    """The generating rule: correct answer tokens (with EOS) for a prompt."""
    vals = [_visual_value(t) for t in vision[1:5]]
    slot = _slot_value(question[1])
    off = question[2] - OFF0
    a1 = (vals[slot] + off) % N_ANSWER
    a2 = (vals[(slot + 1) % 4] + off) % N_ANSWER
    return (ANSWER0 + a1, ANSWER0 + a2, EOS)


def _draw_prompt(rng: np.random.Generator, source: str):
    vis = [int(VISUAL0 + rng.integers(N_VISUAL)) for _ in range(4)]
    blur_p = 0.75 if source == "OOD_B" else 0.5
    blur = bool(rng.random() < blur_p)
    slot = int(rng.integers(4))
    off = int(rng.integers(4))
    slot_tok = SLOT0 + slot
    if source == "OOD_A" and rng.random() < 0.5:
        slot_tok = SLOT_SYN0 + slot
    if source == "OOD_B":
        vis[int(rng.integers(4))] = int(UNSEEN_VISUAL0 + rng.integers(4))
    vision = (BOS, *vis, BLUR if blur else CLEAR)
    question = (SEP, slot_tok, OFF0 + off, SEP)
    return vision, question, blur


def _draw_refs(rng, answer, blur, noise_rate):
    truth = answer_text(answer)
    p_noisy = min(1.0, 2 * noise_rate) if blur else max(0.0, 2 * noise_rate - 1.0)
    refs = [truth] * N_REFS
    if rng.random() < p_noisy:
        a1, a2 = answer[0] - ANSWER0, answer[1] - ANSWER0
        shift = 1 + int(rng.integers(N_ANSWER - 1))
        wrong = answer_text((ANSWER0 + (a1 + shift) % N_ANSWER, ANSWER0 + a2))
        n_wrong = 8 + int(rng.integers(3))
        for j in rng.permutation(N_REFS)[:n_wrong]:
            refs[int(j)] = wrong
    return tuple(refs)


def split_sizes(n: int) -> dict[str, int]:
    n_train = int(round(SPLIT_FRACTIONS[0][1] * n))
    n_dev = int(round(SPLIT_FRACTIONS[1][1] * n))
    return {"train": n_train, "dev": n_dev, "test": n - n_train - n_dev}


_STREAMS = {"ID": 0, "OOD_A": 1, "OOD_B": 2}
CORPUS_STREAM = 3


def generate(cfg: TaskConfig) -> list[Sample]:
    """Deterministic sample list for ``cfg``; splits are contiguous and disjoint."""
    rng = np.random.default_rng([cfg.seed, _STREAMS[cfg.source]])
    sizes = split_sizes(cfg.n_samples)
    out = []
    i = 0
    for split, _ in SPLIT_FRACTIONS:
        for _ in range(sizes[split]):
            vision, question, blur = _draw_prompt(rng, cfg.source)
            answer = solve(vision, question)
            refs = _draw_refs(rng, answer, blur, cfg.noise_rate)
            out.append(Sample(f"{cfg.source.lower()}-{cfg.seed}-{i:06d}", split, cfg.source,
                              vision, question, answer, refs))
            i += 1
    return out


def pretraining_corpus(seed: int, n: int) -> list[Sample]:
    """``n`` clean in-distribution samples from a stream disjoint from every task source.

    The toy decoder is trained on this corpus, standing in for a pretrained
    model that has never seen the evaluation splits.
    """
    rng = np.random.default_rng([seed, CORPUS_STREAM])
    out = []
    for i in range(n):
        vision, question, _ = _draw_prompt(rng, "ID")
        answer = solve(vision, question)
        out.append(Sample(f"corpus-{seed}-{i:07d}", "train", "ID", vision, question, answer,
                          (answer_text(answer),) * N_REFS))
    return out


def calibration_batch(samples: list[Sample], size: int = 128) -> list[dict]:
    """First ``size`` training samples as calibration sequences with modality tags."""
    train = [s for s in samples if s.split == "train"][:size]
    if not train:
        raise ValidationError("no training samples to calibrate on")
    return [{"tokens": list(s.tokens), "modality": list(s.modality)} for s in train]
