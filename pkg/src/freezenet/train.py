"""Masked SGD-with-momentum training.

Modes:

* baseline       dense training, all-ones mask
* freezenet      saliency mask; non-selected weights stay frozen at init
* freezenet_wd   as freezenet, but weight decay also pulls frozen weights
                 toward zero (wd_mode all_weights)
* snip           saliency mask; non-selected weights zeroed at step 0
* grasp_prune    importance mask (signed scores); non-selected zeroed
* random_freeze  uniformly random mask; non-selected frozen at init

Weight decay is coupled L2: the decay term is added to the gradient before
the momentum buffer. In trainable_only mode only m*W decays; in all_weights
mode frozen weights keep a momentum buffer too and shrink geometrically.
The learning rate follows lr * factor^(step // every), counted in
optimization steps from 0.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as data_mod
from . import nn, selection
from .errors import DataError, NumericError, ParameterError
from .rng import RngStream
from .selection import FreezeMask

MODES = ("baseline", "freezenet", "freezenet_wd", "snip", "grasp_prune", "random_freeze")
PRUNE_MODES = ("snip", "grasp_prune")
WD_MODES = ("trainable_only", "all_weights")


def default_seeds(seed: int = 1) -> dict:
    return {"init": seed, "shuffle": seed, "rescue": seed, "reinit": seed}


@dataclass
class TrainConfig:
    epochs: int
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    wd_mode: str = "trainable_only"
    batch_size: int = 100
    lr_decay_every: int = 25_000
    lr_decay_factor: float = 0.1
    split: str = "9/1"
    seeds: dict = field(default_factory=default_seeds)
    init_scheme: str = "xavier_normal"
    reinit_scheme: Optional[str] = None
    track_grad_flow: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.wd_mode not in WD_MODES:
            raise ParameterError(f"wd_mode must be one of {WD_MODES}")
        missing = {"init", "shuffle", "rescue", "reinit"} - set(self.seeds)
        if missing:
            raise ParameterError(f"seeds missing purposes: {sorted(missing)}")


@dataclass
class TrainState:
    params: nn.ParamSet
    velocity_w: np.ndarray
    velocity_b: np.ndarray
    mask: FreezeMask
    step: int = 0
    best_val_acc: float = -1.0
    best_snapshot: Optional[nn.ParamSet] = None
    epoch_of_best: int = 0
    last_lr: float = 0.0
    mask_f: Optional[np.ndarray] = None


def all_ones_mask(spec) -> FreezeMask:
    return FreezeMask(np.ones(spec.weight_count, np.uint8),
                      selection.as_rate(0), spec.weight_count, 0)


def new_state(params: nn.ParamSet, mask: FreezeMask) -> TrainState:
    return TrainState(
        params=params,
        velocity_w=np.zeros_like(params.weights),
        velocity_b=np.zeros_like(params.biases),
        mask=mask,
        mask_f=mask.bits.astype(params.dtype),
    )


def sgd_step(state: TrainState, grads: nn.Gradients, mask: FreezeMask,
             cfg: TrainConfig) -> TrainState:
    """One update. Masked weights receive an exactly-zero effective gradient
    in trainable_only mode, so their velocity stays +0.0 and their bits never
    change."""
    p = state.params
    if grads.weights.shape != p.weights.shape or grads.biases.shape != p.biases.shape:
        raise ParameterError("gradient layout does not match the parameter set")
    if mask.bits.shape != p.weights.shape:
        raise ParameterError("mask layout does not match the parameter set")
    if state.mask_f is None or state.mask is not mask:
        state.mask = mask
        state.mask_f = mask.bits.astype(p.dtype)
    mf = state.mask_f
    dtype = p.dtype.type
    lr_val = cfg.lr * cfg.lr_decay_factor ** (state.step // cfg.lr_decay_every)
    lr_t = dtype(lr_val)
    wd = dtype(cfg.weight_decay)
    mom = dtype(cfg.momentum)

    eff = grads.weights * mf
    if cfg.weight_decay != 0:
        decayed = p.weights * mf if cfg.wd_mode == "trainable_only" else p.weights
        eff += wd * decayed
    state.velocity_w *= mom
    state.velocity_w += eff
    p.weights -= lr_t * state.velocity_w

    eff_b = grads.biases + (wd * p.biases if cfg.weight_decay != 0 else dtype(0))
    state.velocity_b *= mom
    state.velocity_b += eff_b
    p.biases -= lr_t * state.velocity_b

    state.step += 1
    state.last_lr = lr_val
    p.bump()
    return state


def evaluate(spec, params, ds: data_mod.Dataset, batch_size=1000):
    total_loss = 0.0
    correct = 0
    for idx in data_mod.batches(len(ds), batch_size):
        logp, _ = nn.forward(spec, params, ds.images[idx])
        total_loss += nn.nll_loss(logp, ds.labels[idx]) * len(idx)
        correct += int((logp.argmax(axis=1) == ds.labels[idx]).sum())
    return total_loss / len(ds), correct / len(ds)


def reinitialize(spec, mask: FreezeMask, scheme_b: str,
                 reinit_stream: RngStream) -> nn.ParamSet:
    """Fresh parameters under scheme_b; the mask is untouched by design."""
    if mask.bits.shape != (spec.weight_count,):
        raise ParameterError("mask does not match the architecture")
    return nn.init_params(spec, scheme_b, reinit_stream)


@dataclass
class GradFlowReport:
    mean_abs_grad: float
    trainable_count: int
    baseline_mean: Optional[float] = None
    per_layer_weight_l1: Optional[list] = None  # |m*dW| sum per weight layer

    @property
    def ratio(self) -> Optional[float]:
        if self.baseline_mean is None:
            return None
        return self.mean_abs_grad / self.baseline_mean


def gradient_flow_probe(spec, params, mask: FreezeMask, ds: data_mod.Dataset,
                        batch_size=100, baseline_mean=None) -> GradFlowReport:
    """L1 norm of the masked gradient accumulated over the whole set, divided
    by the trainable-parameter count (kept weights + all biases)."""
    mf = mask.bits.astype(params.dtype)
    layout = spec.weight_layout()
    per_layer = [0.0] * len(layout)
    bias_total = 0.0
    for idx in data_mod.batches(len(ds), batch_size):
        _, cache = nn.forward(spec, params, ds.images[idx])
        g = nn.backward(spec, params, cache, ds.labels[idx])
        masked = np.abs(g.weights * mf)
        for li, (_, w_shape, w_off, _, _, _, _) in enumerate(layout):
            n = int(np.prod(w_shape))
            per_layer[li] += float(masked[w_off:w_off + n].sum())
        bias_total += float(np.abs(g.biases).sum())
    count = mask.popcount + spec.bias_count
    total = sum(per_layer) + bias_total
    return GradFlowReport(total / count, count, baseline_mean, per_layer)


def build_run_mask(spec, params, mode: str, q, batch, rescue_stream) -> FreezeMask:
    """Mask construction for a mode: scores from one batch, then top-k + rescue."""
    if mode == "baseline":
        return all_ones_mask(spec)
    if mode in ("freezenet", "freezenet_wd", "snip"):
        scores = selection.snip_scores(spec, params, batch)
    elif mode == "grasp_prune":
        scores = selection.grasp_scores(spec, params, batch)
    elif mode == "random_freeze":
        scores = selection.random_scores(spec, rescue_stream)
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    return selection.build_mask(scores, q, spec, rescue_stream)


def train(spec, cfg: TrainConfig, dataset: data_mod.Dataset, mode: str, q=0):
    """Full run: init, one-shot mask, masked SGD epochs, early-stopping
    snapshot. Returns (TrainState, history rows)."""
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    if mode == "baseline" and selection.as_rate(q) != 0:
        raise ParameterError("baseline mode trains densely; q must be 0")
    if len(dataset) == 0:
        raise DataError("training dataset is empty")

    params = nn.init_params(spec, cfg.init_scheme, RngStream(cfg.seeds["init"], "init"))
    shuffle_stream = RngStream(cfg.seeds["shuffle"], "shuffle")
    tr, va = data_mod.split_shuffle(dataset, cfg.split, shuffle_stream)
    rescue_stream = RngStream(cfg.seeds["rescue"], "rescue")

    # the scoring batch is the first batch of epoch 1's permutation
    perm1 = shuffle_stream.permutation(len(tr))
    first = perm1[:cfg.batch_size]
    mask = build_run_mask(spec, params, mode, q,
                          (tr.images[first], tr.labels[first]), rescue_stream)

    if cfg.reinit_scheme is not None:
        params = reinitialize(spec, mask, cfg.reinit_scheme,
                              RngStream(cfg.seeds["reinit"], "reinit"))
    if mode in PRUNE_MODES:
        params.weights *= mask.bits.astype(params.dtype)
        params.bump()

    run_cfg = cfg
    if mode == "freezenet_wd" and cfg.wd_mode != "all_weights":
        run_cfg = TrainConfig(**{**cfg.__dict__, "wd_mode": "all_weights"})

    state = new_state(params, mask)
    frozen = mask.bits == 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        perm = perm1 if epoch == 1 else shuffle_stream.permutation(len(tr))
        loss_sum = 0.0
        correct = 0
        for idx in data_mod.batches(len(tr), cfg.batch_size, perm):
            x, y = tr.images[idx], tr.labels[idx]
            logp, cache = nn.forward(spec, params, x)
            loss = nn.nll_loss(logp, y)
            if not np.isfinite(loss):
                raise NumericError(f"loss became {loss} at step {state.step}")
            loss_sum += loss * len(idx)
            correct += int((logp.argmax(axis=1) == y).sum())
            grads = nn.backward(spec, params, cache, y)
            sgd_step(state, grads, mask, run_cfg)
        _, val_acc = evaluate(spec, params, va)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / len(tr),
            "train_acc": correct / len(tr),
            "val_acc": val_acc,
            "lr": state.last_lr,
            "grad_flow": None,
            "max_frozen_magnitude": float(np.abs(params.weights[frozen]).max())
            if frozen.any() else None,
        }
        if cfg.track_grad_flow:
            row["grad_flow"] = gradient_flow_probe(
                spec, params, mask, tr, cfg.batch_size).mean_abs_grad
        history.append(row)
        if val_acc > state.best_val_acc:
            state.best_val_acc = val_acc
            state.best_snapshot = params.copy()
            state.epoch_of_best = epoch
    return state, history
