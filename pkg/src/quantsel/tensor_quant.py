"""Group-wise affine weight quantization (RTN baseline and HQQ refinement).

A weight matrix is flattened row-major and cut into consecutive groups of
``group_size`` values; the last group may be partial. Weight matrices are
stored ``(out_features, in_features)`` so groups run along the input-channel
axis. Each group ``g`` carries a scale ``s_g > 0`` and a real zero-point
``z_g``; a code ``q`` dequantizes to ``s_g * (q - z_g)``.

Rounding is half-away-from-zero everywhere.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .packing import pack_codes, packed_size, unpack_codes

__all__ = [
    "Method",
    "QuantSpec",
    "QuantizedTensor",
    "round_half_away",
    "shrink_lp",
    "rtn_quantize",
    "hqq_optimize",
    "quantize",
    "dequantize",
    "fake_quantize",
    "lp_error",
    "quant_error",
    "storage_bytes",
]

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
# power of two >= SCALE_FLOOR: constant groups reconstruct exactly with it
CONSTANT_GROUP_SCALE = 2.0**-26
# half-quadratic penalty schedule (beta grows by kappa each round)
HQQ_BETA = 10.0
HQQ_KAPPA = 1.01
DIVERGENCE_TOL = 1e-9


class Method(str, enum.Enum):
    RTN = "RTN"
    HQQ = "HQQ"
    MBQ = "MBQ"


@dataclass(frozen=True)
class QuantSpec:
    """Quantization parameters.

    ``lp_norm`` is the shape parameter of the heavy-tailed error model used by
    the HQQ solver; ``hqq_iters`` its number of alternation rounds.
    """

    bits: int = 4
    group_size: int = 64
    method: Method = Method.RTN
    lp_norm: float = 0.7
    hqq_iters: int = 20

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.bits not in (3, 4, 8):
            raise ValidationError(f"bits must be 3, 4 or 8, got {self.bits}")
        if self.group_size < 1:
            raise ValidationError(f"group_size must be >= 1, got {self.group_size}")
        if not 0.0 < self.lp_norm <= 1.0:
            raise ValidationError(f"lp_norm must lie in (0, 1], got {self.lp_norm}")
        if self.hqq_iters < 0:
            raise ValidationError(f"hqq_iters must be >= 0, got {self.hqq_iters}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    shape: tuple[int, int]
    codes: bytes
    scales: np.ndarray
    zero_points: np.ndarray
    spec: QuantSpec
    solver_log: tuple[str, ...] = field(default=(), compare=False)

    @property
    def numel(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def n_groups(self) -> int:
        return -(-self.numel // self.spec.group_size)

    def unpacked_codes(self) -> np.ndarray:
        return unpack_codes(self.codes, self.spec.bits, self.numel)

    def same_as(self, other: "QuantizedTensor") -> bool:
        """Bit-for-bit equality of shape, codes and parameters."""
        return (
            self.shape == other.shape
            and self.spec == other.spec
            and self.codes == other.codes
            and self.scales.tobytes() == other.scales.tobytes()
            and self.zero_points.tobytes() == other.zero_points.tobytes()
        )


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), x)


def shrink_lp(x, beta: float, p: float):
    """Generalized soft-threshold for an l_p penalty (p <= 1).

    ``sign(x) * max(|x| - |x|^(p-1) / beta, 0)``; p = 1 is ordinary soft
    thresholding with threshold ``1/beta``.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    with np.errstate(divide="ignore"):
        thr = np.where(a > 0, np.power(np.maximum(a, 1e-300), p - 1.0), np.inf) / beta
    return np.sign(x) * np.maximum(a - thr, 0.0)


def _as_matrix(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if w.ndim != 2:
        raise ValidationError(f"expected a matrix, got shape {w.shape}")
    bad = np.argwhere(~np.isfinite(w))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise ValidationError(f"non-finite weight {w[idx]} at index {idx}")
    return w


def _grouped(w: np.ndarray, group_size: int):
    """Return (G, group_size) view padded with NaN and the validity mask."""
    flat = w.reshape(-1)
    n = flat.size
    n_groups = -(-n // group_size)
    padded = np.full(n_groups * group_size, np.nan)
    padded[:n] = flat
    grid = padded.reshape(n_groups, group_size)
    return grid, ~np.isnan(grid)


def _quantize_codes(wg, scales, zeros, qmax):
    q = round_half_away(wg / scales[:, None] + zeros[:, None])
    return np.clip(q, 0, qmax)


def _rtn_params(wg, mask, qmax):
    lo = np.min(np.where(mask, wg, np.inf), axis=1)
    hi = np.max(np.where(mask, wg, -np.inf), axis=1)
    const = hi == lo
    scales = np.maximum((hi - lo) / qmax, SCALE_FLOOR)
    scales[const] = CONSTANT_GROUP_SCALE
    zeros = round_half_away(-lo / scales)
    # q = 0 reconstructs s * (0 - z) = lo exactly; 2^-26 scaling is exact
    zeros[const] = -lo[const] / CONSTANT_GROUP_SCALE
    return scales, zeros


def _finish(w, wg, mask, scales, zeros, spec, log=()):
    q = _quantize_codes(np.where(mask, wg, 0.0), scales, zeros, spec.qmax)
    codes = q[mask].astype(np.int64)
    return QuantizedTensor(
        shape=(int(w.shape[0]), int(w.shape[1])),
        codes=pack_codes(codes, spec.bits),
        scales=scales.astype(np.float64),
        zero_points=zeros.astype(np.float64),
        spec=spec,
        solver_log=tuple(log),
    )


def rtn_quantize(weights, spec: QuantSpec) -> QuantizedTensor:
    """Min-max round-to-nearest quantization with an integer zero-point."""
    w = _as_matrix(weights)
    wg, mask = _grouped(w, spec.group_size)
    scales, zeros = _rtn_params(wg, mask, spec.qmax)
    return _finish(w, wg, mask, scales, zeros, spec)


def _group_lp(wg, mask, scales, zeros, q, p):
    r = np.where(mask, wg - scales[:, None] * (q - zeros[:, None]), 0.0)
    return np.sum(np.abs(r) ** p, axis=1)


def hqq_optimize(weights, spec: QuantSpec) -> QuantizedTensor:
    """Refine RTN zero-points with half-quadratic alternation, scales fixed.

    Per group and round: shrink the reconstruction residual with the l_p
    soft-threshold, set the zero-point to its closed-form minimizer
    ``mean(q - (w - e)/s)``, re-quantize. The best iterate (lowest l_p error,
    RTN included) is kept per group; a group stops when its error rises by
    more than ``DIVERGENCE_TOL``.
    """
    if spec.hqq_iters < 0:
        raise ValidationError(f"hqq_iters must be >= 0, got {spec.hqq_iters}")
    w = _as_matrix(weights)
    wg, mask = _grouped(w, spec.group_size)
    wz = np.where(mask, wg, 0.0)
    p = spec.lp_norm
    scales, zeros = _rtn_params(wg, mask, spec.qmax)
    counts = mask.sum(axis=1)

    q = _quantize_codes(wz, scales, zeros, spec.qmax)
    err = _group_lp(wz, mask, scales, zeros, q, p)
    best_err, best_zeros = err.copy(), zeros.copy()
    active = np.ones(len(scales), dtype=bool)
    log = []
    beta = HQQ_BETA
    for it in range(spec.hqq_iters):
        if not active.any():
            break
        recon = scales[:, None] * (q - zeros[:, None])
        e = np.where(mask, shrink_lp(wz - recon, beta, p), 0.0)
        target = np.where(mask, q - (wz - e) / scales[:, None], 0.0)
        new_zeros = np.where(active, target.sum(axis=1) / counts, zeros)
        new_q = _quantize_codes(wz, scales, new_zeros, spec.qmax)
        new_err = _group_lp(wz, mask, scales, new_zeros, new_q, p)
        diverged = active & (new_err > err + DIVERGENCE_TOL)
        if diverged.any():
            log.append(f"iter {it}: {int(diverged.sum())} group(s) diverged, kept best iterate")
        active &= ~diverged
        zeros = np.where(active, new_zeros, zeros)
        q = np.where(active[:, None], new_q, q)
        err = np.where(active, new_err, err)
        improved = active & (err < best_err)
        best_err = np.where(improved, err, best_err)
        best_zeros = np.where(improved, zeros, best_zeros)
        beta *= HQQ_KAPPA
    for line in log:
        logger.debug("hqq: %s", line)
    return _finish(w, wg, mask, scales, best_zeros, spec, log)


def quantize(weights, spec: QuantSpec) -> QuantizedTensor:
    """Data-free quantization: HQQ for ``Method.HQQ``, RTN otherwise.

    MBQ reuses RTN as its base quantizer after channel equalization.
    """
    if spec.method is Method.HQQ:
        return hqq_optimize(weights, spec)
    return rtn_quantize(weights, spec)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    q = qt.unpacked_codes().astype(np.float64)
    if q.size and q.max() > qt.spec.qmax:
        raise ValidationError("code exceeds the bit width")
    if qt.scales.shape != (qt.n_groups,) or qt.zero_points.shape != (qt.n_groups,):
        raise ValidationError("scale/zero-point count does not match group count")
    if not np.all(qt.scales > 0):
        raise ValidationError("scales must be strictly positive")
    g = np.arange(qt.numel) // qt.spec.group_size
    return (qt.scales[g] * (q - qt.zero_points[g])).reshape(qt.shape)


def fake_quantize(weights, spec: QuantSpec | None) -> np.ndarray:
    """``dequantize(quantize(w))``; ``spec=None`` is the identity (no-op quantizer)."""
    if spec is None:
        return np.array(weights, dtype=np.float64, copy=True)
    w = _as_matrix(weights)
    return dequantize(quantize(w, spec))


def lp_error(a, b, p: float = 2.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(np.abs(a - b) ** p))


def quant_error(weights, qt: QuantizedTensor, p: float = 2.0) -> float:
    """``sum |w - w~|^p``; p = 2 is the L2 (squared) error."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if tuple(w.shape) != qt.shape:
        raise ValidationError(f"shape mismatch: {w.shape} vs {qt.shape}")
    return lp_error(w, dequantize(qt), p)


def storage_bytes(qt: QuantizedTensor, param_bytes: int = 4) -> int:
    """Payload bytes: packed codes plus one scale and one zero-point per group."""
    return packed_size(qt.numel, qt.spec.bits) + 2 * param_bytes * qt.n_groups


def with_spec(spec: QuantSpec, **changes) -> QuantSpec:
    return replace(spec, **changes)


def expected_storage_ratio(bits: int, group_size: int, param_bits: int = 32, base_bits: int = 16) -> float:
    """Asymptotic quantized/original size ratio for large tensors."""
    return (bits + 2 * param_bits / group_size) / base_bits

