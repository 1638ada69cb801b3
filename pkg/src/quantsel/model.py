"""Desk-scale two-modality autoregressive decoder in float64 numpy.

Pre-norm transformer: token + learned position embeddings, ``n_layers``
blocks of causal multi-head self-attention and a GELU feed-forward
(width ``4 * d_model``), final layer norm, output projection. Linear maps have
no bias and are stored ``(out_features, in_features)``; ``y = x @ W.T``.

Vision tokens are ordinary token ids; the modality only matters for
feature pooling and calibration bookkeeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .tensor_quant import QuantSpec, QuantizedTensor, dequantize, quantize

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 40
    max_seq: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValidationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def as_tuple(self) -> tuple[int, ...]:
        return (self.d_model, self.n_layers, self.n_heads, self.vocab_size, self.max_seq, self.seed)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    per_layer = 4 * d * d + 2 * d * f + 4 * d
    return 2 * v * d + cfg.max_seq * d + cfg.n_layers * per_layer + 2 * d


LINEAR_SUFFIXES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2")


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def linear_names(self) -> list[str]:
        names = [
            f"blocks.{i}.{s}" for i in range(self.cfg.n_layers) for s in LINEAR_SUFFIXES
        ]
        return names + ["head"]

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def weight_bytes(self) -> bytes:
        return b"".join(self.params[k].tobytes() for k in sorted(self.params))


def init_model(cfg: ModelConfig) -> Model:
    """Seeded initialization; identical seeds give bit-identical weights."""
    rng = np.random.default_rng(cfg.seed)
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = rng.normal(0.0, 1.0, (v, d))
    p["pos_emb"] = rng.normal(0.0, 0.5, (cfg.max_seq, d))
    resid = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        p[b + "ln1.g"] = np.ones(d)
        p[b + "ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv"):
            p[b + "attn." + w] = rng.normal(0.0, d**-0.5, (d, d))
        p[b + "attn.wo"] = rng.normal(0.0, resid * d**-0.5, (d, d))
        p[b + "ln2.g"] = np.ones(d)
        p[b + "ln2.b"] = np.zeros(d)
        p[b + "mlp.w1"] = rng.normal(0.0, d**-0.5, (f, d))
        p[b + "mlp.w2"] = rng.normal(0.0, resid * f**-0.5, (d, f))
    p["ln_f.g"] = np.ones(d)
    p["ln_f.b"] = np.zeros(d)
    p["head"] = rng.normal(0.0, d**-0.5, (v, d))
    return Model(cfg, p)


# --- primitives -----------------------------------------------------------------


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd, g)


def _layernorm_back(dy, cache):
    xh, rstd, g = cache
    dg = (dy * xh).reshape(-1, xh.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xh.shape[-1]).sum(axis=0)
    dxh = dy * g
    dx = rstd * (
        dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u * u * u)))


def _gelu_grad(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# --- forward / backward ---------------------------------------------------------


def _check_tokens(model: Model, tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[1] < 1:
        raise ValidationError(f"tokens must be a non-empty (batch, seq) array, got {t.shape}")
    if t.shape[1] > model.cfg.max_seq:
        raise ValidationError(f"sequence length {t.shape[1]} exceeds max_seq={model.cfg.max_seq}")
    if t.min() < 0 or t.max() >= model.cfg.vocab_size:
        raise ValidationError(f"token id out of range [0, {model.cfg.vocab_size})")
    return t


def forward_with_cache(model: Model, tokens, input_embeds=None):
    """Run the decoder on ``(B, T)`` tokens; returns ``(logits, cache)``.

    ``cache["inputs"][name]`` holds the input activations of every linear
    map, ``cache["hidden"]`` the final (normalized) hidden states.
    ``input_embeds`` overrides the token-embedding lookup (used by gradient
    checks with respect to the embeddings).
    """
    cfg, p = model.cfg, model.params
    t = _check_tokens(model, tokens)
    B, T = t.shape
    H, dh = cfg.n_heads, cfg.head_dim
    emb = p["tok_emb"][t] if input_embeds is None else np.asarray(input_embeds, dtype=np.float64)
    x = emb + p["pos_emb"][:T]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    cache = {"tokens": t, "layers": [], "inputs": {}}
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        h, ln1 = _layernorm(x, p[b + "ln1.g"], p[b + "ln1.b"])
        q = (h @ p[b + "attn.wq"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (h @ p[b + "attn.wk"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (h @ p[b + "attn.wv"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        s = np.where(mask, -np.inf, s)
        a = softmax(s)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        x = x + o @ p[b + "attn.wo"].T
        h2, ln2 = _layernorm(x, p[b + "ln2.g"], p[b + "ln2.b"])
        u = h2 @ p[b + "mlp.w1"].T
        m = gelu(u)
        x = x + m @ p[b + "mlp.w2"].T
        cache["layers"].append(dict(ln1=ln1, q=q, k=k, v=v, a=a, ln2=ln2, u=u))
        for suffix, inp in (("attn.wq", h), ("attn.wk", h), ("attn.wv", h),
                            ("attn.wo", o), ("mlp.w1", h2), ("mlp.w2", m)):
            cache["inputs"][b + suffix] = inp
    hf, lnf = _layernorm(x, p["ln_f.g"], p["ln_f.b"])
    cache["lnf"] = lnf
    cache["hidden"] = hf
    cache["inputs"]["head"] = hf
    logits = hf @ p["head"].T
    return logits, cache


def forward(model: Model, tokens) -> np.ndarray:
    """Logits per position; causal, so row ``k`` depends on tokens ``<= k`` only."""
    logits, _ = forward_with_cache(model, tokens)
    return logits


def backward(model: Model, cache, dlogits):
    """Gradients of a scalar loss given ``d loss / d logits``.

    Returns ``(param_grads, d_input_embeds)``.
    """
    cfg, p = model.cfg, model.params
    B, T, _ = dlogits.shape
    H, dh, D = cfg.n_heads, cfg.head_dim, cfg.d_model
    g: dict[str, np.ndarray] = {}
    inputs = cache["inputs"]
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731

    g["head"] = flat(dlogits).T @ flat(inputs["head"])
    dhf = dlogits @ p["head"]
    dx, g["ln_f.g"], g["ln_f.b"] = _layernorm_back(dhf, cache["lnf"])
    for i in reversed(range(cfg.n_layers)):
        b = f"blocks.{i}."
        c = cache["layers"][i]
        # feed-forward
        dm = dx @ p[b + "mlp.w2"]
        g[b + "mlp.w2"] = flat(dx).T @ flat(inputs[b + "mlp.w2"])
        du = dm * _gelu_grad(c["u"])
        g[b + "mlp.w1"] = flat(du).T @ flat(inputs[b + "mlp.w1"])
        dh2 = du @ p[b + "mlp.w1"]
        dln, g[b + "ln2.g"], g[b + "ln2.b"] = _layernorm_back(dh2, c["ln2"])
        dx = dx + dln
        # attention
        g[b + "attn.wo"] = flat(dx).T @ flat(inputs[b + "attn.wo"])
        do = (dx @ p[b + "attn.wo"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        a, q, k, v = c["a"], c["q"], c["k"], c["v"]
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        merge = lambda z: z.transpose(0, 2, 1, 3).reshape(B, T, D)  # noqa: E731
        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        h = inputs[b + "attn.wq"]
        g[b + "attn.wq"] = flat(dq).T @ flat(h)
        g[b + "attn.wk"] = flat(dk).T @ flat(h)
        g[b + "attn.wv"] = flat(dv).T @ flat(h)
        dh_ = dq @ p[b + "attn.wq"] + dk @ p[b + "attn.wk"] + dv @ p[b + "attn.wv"]
        dln, g[b + "ln1.g"], g[b + "ln1.b"] = _layernorm_back(dh_, c["ln1"])
        dx = dx + dln
    g["pos_emb"] = np.zeros_like(p["pos_emb"])
    g["pos_emb"][:T] = dx.sum(axis=0)
    tok = cache["tokens"]
    g["tok_emb"] = np.zeros_like(p["tok_emb"])
    np.add.at(g["tok_emb"], tok.reshape(-1), flat(dx))
    return g, dx


def next_token_targets(tokens):
    """Targets and mask for next-token prediction on every position but the last."""
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim == 1:
        t = t[None, :]
    targets = np.zeros_like(t)
    targets[:, :-1] = t[:, 1:]
    mask = np.zeros(t.shape, dtype=bool)
    mask[:, :-1] = True
    return targets, mask


def cross_entropy(logits, targets, mask):
    """Summed next-token cross-entropy and its gradient with respect to the logits."""
    lp = log_softmax(logits)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(np.where(mask, picked, 0.0)))
    dlogits = np.exp(lp)
    np.put_along_axis(
        dlogits, targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1,
    )
    dlogits *= mask[..., None]
    return loss, dlogits


def backprop(model: Model, tokens, targets=None, loss_mask=None, input_embeds=None):
    """Summed cross-entropy loss and exact gradients.

    Targets default to next-token prediction over the whole sequence. Returns
    ``(loss, param_grads, d_input_embeds)``; the loss is a sum, so duplicating
    the batch doubles every gradient.
    """
    tokens = _check_tokens(model, tokens)
    if targets is None:
        targets, default_mask = next_token_targets(tokens)
        loss_mask = default_mask if loss_mask is None else loss_mask
    targets = np.asarray(targets, dtype=np.int64).reshape(tokens.shape)
    loss_mask = np.ones(tokens.shape, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool).reshape(tokens.shape)
    logits, cache = forward_with_cache(model, tokens, input_embeds)
    loss, dlogits = cross_entropy(logits, targets, loss_mask)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    grads, dx = backward(model, cache, dlogits)
    return loss, grads, dx


# --- decoding -------------------------------------------------------------------


@dataclass(frozen=True)
class MMInput:
    vision_tokens: tuple[int, ...]
    question_tokens: tuple[int, ...]

    @property
    def prompt(self) -> tuple[int, ...]:
        return tuple(self.vision_tokens) + tuple(self.question_tokens)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Selector input: pooled vision/question states, first-step state, joint probability."""

    v: np.ndarray
    q: np.ndarray
    o1: np.ndarray
    p: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.v, self.q, self.o1, [self.p]])

    def to_dict(self) -> dict:
        return {"v": self.v.tolist(), "q": self.q.tolist(), "o1": self.o1.tolist(), "p": self.p}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureVector":
        return cls(np.asarray(d["v"], dtype=np.float64), np.asarray(d["q"], dtype=np.float64),
                   np.asarray(d["o1"], dtype=np.float64), float(d["p"]))

    def __eq__(self, other):
        return isinstance(other, FeatureVector) and self.as_array().tobytes() == other.as_array().tobytes()


@dataclass(frozen=True)
class Generation:
    answer_tokens: tuple[int, ...]
    step_probs: tuple[float, ...]
    features: FeatureVector


def _validate_inputs(model: Model, xs: list[MMInput], max_new: int) -> None:
    for x in xs:
        if not x.question_tokens:
            raise ValidationError("question must be non-empty")
        if len(x.prompt) + max_new > model.cfg.max_seq:
            raise ValidationError(
                f"prompt length {len(x.prompt)} + max_new {max_new} exceeds max_seq={model.cfg.max_seq}"
            )
    if max_new < 1:
        raise ValidationError("max_new must be >= 1")


def _decode_group(model, xs, max_new, eos_id):
    nv, nq = len(xs[0].vision_tokens), len(xs[0].question_tokens)
    seq = np.array([x.prompt for x in xs], dtype=np.int64)
    B, T0 = seq.shape
    done = np.zeros(B, dtype=bool)
    answers = [[] for _ in range(B)]
    probs = [[] for _ in range(B)]
    feats = None
    for step in range(max_new):
        logits, cache = forward_with_cache(model, seq)
        if step == 0:
            hid = cache["hidden"]
            feats = (
                hid[:, :nv].max(axis=1) if nv else np.zeros((B, model.cfg.d_model)),
                hid[:, nv:nv + nq].max(axis=1),
                hid[:, T0 - 1].copy(),
            )
        pr = softmax(logits[:, -1])
        nxt = pr.argmax(axis=-1)
        for i in range(B):
            if not done[i]:
                answers[i].append(int(nxt[i]))
                probs[i].append(float(pr[i, nxt[i]]))
                if eos_id is not None and nxt[i] == eos_id:
                    done[i] = True
        if done.all():
            break
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    out = []
    for i in range(B):
        p = math.exp(math.fsum(np.log(probs[i])))
        fv = FeatureVector(feats[0][i].copy(), feats[1][i].copy(), feats[2][i].copy(), p)
        out.append(Generation(tuple(answers[i]), tuple(probs[i]), fv))
    return out


def greedy_decode_batch(model: Model, xs: list[MMInput], max_new: int, eos_id: int | None = None) -> list[Generation]:
    """Greedy decoding of many inputs; inputs sharing prompt shape are batched.

    Order and grouping are deterministic, so repeated calls give identical
    results.
    """
    _validate_inputs(model, xs, max_new)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, x in enumerate(xs):
        groups.setdefault((len(x.vision_tokens), len(x.question_tokens)), []).append(i)
    out: list[Generation | None] = [None] * len(xs)
    for key in sorted(groups):
        idx = groups[key]
        for i, g in zip(idx, _decode_group(model, [xs[i] for i in idx], max_new, eos_id)):
            out[i] = g
    return out  # type: ignore[return-value]


def greedy_decode(model: Model, x: MMInput, max_new: int, eos_id: int | None = None) -> Generation:
    """Greedy decoding; argmax ties go to the lowest token id.

    Stops after emitting ``eos_id`` (which is kept as the last answer token)
    or after ``max_new`` steps.
    """
    return greedy_decode_batch(model, [x], max_new, eos_id)[0]


# --- quantization ---------------------------------------------------------------


def quantize_weights(model: Model, spec: QuantSpec, plans: dict | None = None) -> dict[str, tuple[QuantizedTensor, np.ndarray | None]]:
    """Quantize every linear weight; with a plan, quantize the channel-scaled weight.

    Returns ``{name: (quantized tensor, equalization scales or None)}``.
    """
    plans = plans or {}
    unknown = set(plans) - set(model.linear_names())
    if unknown:
        raise ValidationError(f"plans for unknown layers: {sorted(unknown)}")
    out = {}
    for name in model.linear_names():
        w = model.params[name]
        plan = plans.get(name)
        s = None
        if plan is not None:
            s = np.asarray(plan.per_channel_scales, dtype=np.float64)
            if s.shape != (w.shape[1],):
                raise ValidationError(
                    f"plan for {name} has {s.shape} scales, layer has {w.shape[1]} input channels"
                )
            if not np.all(np.isfinite(s) & (s > 0)):
                raise ValidationError(f"plan for {name} has non-positive scales")
            w = w * s[None, :]
        out[name] = (quantize(w, spec), s)
    return out


def model_from_quantized(model: Model, qweights: dict) -> Model:
    """Replace linear weights by their dequantized (and un-equalized) versions."""
    params = {k: v.copy() for k, v in model.params.items()}
    for name, (qt, s) in qweights.items():
        w = dequantize(qt)
        params[name] = w if s is None else w / np.asarray(s)[None, :]
    return Model(model.cfg, params)


def quantize_model(model: Model, spec: QuantSpec | None, plans: dict | None = None) -> Model:
    """Weight-only quantization of all linear maps; ``spec=None`` is a no-op copy.

    Embeddings and layer-norm parameters are left untouched.
    """
    if spec is None:
        return model.copy()
    return model_from_quantized(model, quantize_weights(model, spec, plans))


def kl_divergence_logits(ref_logits, logits, mask=None) -> float:
    """Mean KL(ref || other) between next-token distributions over masked positions."""
    lp = log_softmax(ref_logits)
    lq = log_softmax(logits)
    kl = np.sum(np.exp(lp) * (lp - lq), axis=-1)
    if mask is not None:
        kl = kl[np.asarray(mask, dtype=bool)]
    return float(np.mean(kl))
