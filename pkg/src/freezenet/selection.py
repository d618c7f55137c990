"""One-shot trainable-weight selection.

Scores are computed from a single forward/backward pass on one training
batch, before any optimization step:

* snip saliency: g = dL/dW element-times W. Selection keeps the largest
  magnitudes |g|.
* grasp importance: S = W element-times (H g), with the Hessian-vector
  product over weights approximated by central differences of the gradient.
  Selection keeps the largest *signed* scores.
* random: uniform scores, giving a uniformly random mask of the same size.

Masking semantics differ downstream: freeze modes keep non-selected weights
at their initialization, prune modes zero them. Both use the same mask.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import nn
from .errors import DegenerateGradientError, ParameterError
from .rng import RngStream

SCORE_KINDS = ("snip_saliency", "grasp_importance", "random")


@dataclass
class ScoreVector:
    values: np.ndarray  # flat, aligned with ParamSet weights
    kind: str


@dataclass
class FreezeMask:
    bits: np.ndarray  # uint8 flags over flat weights
    q: Fraction       # requested freezing rate
    k: int            # floor((1-q) * |W|)
    rescued: int

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())


def as_rate(q) -> Fraction:
    """Normalize a freezing rate to an exact rational. Floats are read as
    their shortest decimal literal (0.999 -> 999/1000), which is what CLI
    strings mean and what the checkpoint stores."""
    frac = Fraction(str(q)) if isinstance(q, float) else Fraction(q)
    if not 0 <= frac < 1:
        raise ParameterError(f"freezing rate must be in [0, 1), got {q}")
    return frac


def _batch_gradients(spec, params, batch):
    x, labels = batch
    if len(x) == 0:
        raise ParameterError("scoring batch is empty")
    logp, cache = nn.forward(spec, params, x)
    return nn.backward(spec, params, cache, labels)


def snip_scores(spec, params, batch) -> ScoreVector:
    """Loss sensitivity of each weight: one pass, no parameter updates."""
    grads = _batch_gradients(spec, params, batch)
    return ScoreVector(grads.weights * params.weights, "snip_saliency")


def fd_hvp(grad_fn, w0: np.ndarray, v: np.ndarray):
    """Central-difference Hessian-vector product of a gradient function.

    eps = 1e-3 * max(1, ||w||_inf) / max(1e-12, ||v||_inf), so the actual
    perturbation eps*v has infinity-norm 1e-3 * max(1, ||w||_inf).
    """
    vmax = float(np.max(np.abs(v))) if v.size else 0.0
    if vmax == 0.0:
        raise DegenerateGradientError("gradient is identically zero")
    wmax = float(np.max(np.abs(w0))) if w0.size else 0.0
    eps = 1e-3 * max(1.0, wmax) / max(1e-12, vmax)
    gp = grad_fn(w0 + eps * v)
    gm = grad_fn(w0 - eps * v)
    return (gp - gm) / (2.0 * eps)


def grasp_scores(spec, params, batch) -> ScoreVector:
    """Gradient-norm preservation score, computed in float64."""
    x, labels = batch
    if len(x) == 0:
        raise ParameterError("scoring batch is empty")
    p64 = nn.ParamSet(spec, params.weights.astype(np.float64),
                      params.biases.astype(np.float64))

    def grad_at(w):
        p64.weights[:] = w
        p64.bump()
        _, cache = nn.forward(spec, p64, x.astype(np.float64))
        return nn.backward(spec, p64, cache, labels).weights.copy()

    w0 = p64.weights.copy()
    g = grad_at(w0)
    hv = fd_hvp(grad_at, w0, g)
    return ScoreVector(w0 * hv, "grasp_importance")


def random_scores(spec, stream: RngStream) -> ScoreVector:
    return ScoreVector(stream.uniform(0.0, 1.0, spec.weight_count), "random")


def build_mask(scores: ScoreVector, q, spec, rescue_stream: RngStream) -> FreezeMask:
    """Keep the k = floor((1-q)|W|) top-scoring weights, then rescue every
    layer that ended up with no trainable weight by flagging one uniformly
    random weight in it (one rescue-stream draw per such layer, in
    architecture order)."""
    q = as_rate(q)
    n = spec.weight_count
    if scores.values.shape != (n,):
        raise ParameterError("score vector does not match the architecture")
    k = int((1 - q) * n)  # exact: Fraction * int floors via int()
    key = np.abs(scores.values) if scores.kind != "grasp_importance" else scores.values
    bits = np.zeros(n, dtype=np.uint8)
    if k > 0:
        # stable sort on negated scores: ties keep the lowest flat index
        order = np.argsort(-key, kind="stable")
        bits[order[:k]] = 1
    rescued = 0
    for _, w_shape, w_off, _, _, _, _ in spec.weight_layout():
        size = int(np.prod(w_shape))
        if not bits[w_off:w_off + size].any():
            bits[w_off + rescue_stream.randbelow(size)] = 1
            rescued += 1
    return FreezeMask(bits, q, k, rescued)


def real_freezing_rate(mask: FreezeMask, spec) -> Fraction:
    """q_beta = 1 - (popcount + |B|) / (|W| + |B|), exact."""
    return 1 - Fraction(mask.popcount + spec.bias_count,
                        spec.weight_count + spec.bias_count)
