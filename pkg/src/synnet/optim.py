"""Mini-batch SGD with momentum and the training loop.

Update rule per iteration k:
    velocity = rho * velocity + lr * grad
    theta    = theta - velocity

The training loop is a pure function of (initial params, dataset order,
config seed): per-epoch shuffles are drawn from streams derived from the
config seed, so identical reruns are bit-identical and a resumed run
continues exactly where the checkpointed one stopped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import loss as loss_mod
from .loss import LossWeights, SsimConfig
from .tensor import RngStream, ParameterError
from .layers import UsageError

LOSS_KINDS = ("l2", "weighted_l2", "joint")


class TrainingDivergedError(RuntimeError):
    """Total loss became non-finite during training."""


@dataclass
class OptimState:
    velocity: dict = field(default_factory=dict)   # mirrors ParamSet shapes
    iteration: int = 0
    epoch: int = 0
    lr: float = 0.01
    momentum: float = 0.9


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    seed: int = 42
    loss: str = "joint"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    edge_beta: float = 4.0
    shuffle: bool = True
    tv_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("batch_size and epochs must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ParameterError(f"loss must be one of {LOSS_KINDS}")


def sgd_step(params, grads, state: OptimState):
    """One momentum update over every parameter; mutates params and state."""
    if not state.velocity:
        state.velocity = {n: np.zeros_like(p) for n, p in params.items()}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise UsageError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        v = state.velocity[name]
        v = state.momentum * v + state.lr * g.astype(v.dtype)
        state.velocity[name] = v
        params[name] = (p - v).astype(p.dtype)
    state.iteration += 1
    return params, state


def _batch_loss(preds, targets, params, cfg: TrainConfig):
    """Loss terms plus gradients for the configured loss selection."""
    nh = len(preds)
    lw = cfg.loss_weights
    if cfg.loss == "joint":
        maps = [loss_mod.edge_weight_map(t, cfg.edge_beta) for t in targets]
        return loss_mod.joint_loss(preds, targets, params, lw, cfg.ssim,
                                   maps=maps, tv_eps=cfg.tv_eps)
    maps = None
    if cfg.loss == "weighted_l2":
        maps = [loss_mod.edge_weight_map(t, cfg.edge_beta) for t in targets]
    l2_term = 0.0
    pred_grads = []
    for h in range(nh):
        v, g = loss_mod.l2_loss(preds[h], targets[h],
                                None if maps is None else maps[h])
        l2_term += v / nh
        pred_grads.append((g.astype(np.float64) / nh).astype(preds[h].dtype))
    wd_term, wd_grads = loss_mod.weight_decay(params)
    total = l2_term + lw.lambda4 * wd_term
    return loss_mod.LossReport(l2_term, 0.0, 0.0, wd_term, total,
                               pred_grads, wd_grads)


def _stack(samples, side, k):
    return np.concatenate([s[side][k] for s in samples], axis=0)


def train(model, params, state, dataset, cfg: TrainConfig,
          opt_state: OptimState | None = None, augment_fn=None):
    """Run the full loop; returns (params, opt_state, history).

    `dataset` is a sequence of samples, each a pair (inputs, targets) of
    lists of (1, c, h, w) tensors matching the topology's arm counts.
    `augment_fn(sample, rng) -> sample`, when given, is applied per sample
    per epoch with a seeded stream. History holds one row per iteration.
    """
    if not dataset:
        raise ParameterError("dataset is empty")
    if opt_state is None:
        opt_state = OptimState()
    root = RngStream(cfg.seed)
    history = []
    m = len(dataset)
    lam4 = cfg.loss_weights.lambda4

    for epoch in range(opt_state.epoch, cfg.epochs):
        erng = root.child(f"epoch{epoch}")
        order = erng.permutation(m) if cfg.shuffle else np.arange(m)
        samples = [dataset[i] for i in order]
        if augment_fn is not None:
            arng = root.child(f"augment{epoch}")
            samples = [augment_fn(s, arng.child(str(j)))
                       for j, s in enumerate(samples)]
        for lo in range(0, m, cfg.batch_size):
            chunk = samples[lo:lo + cfg.batch_size]
            inputs = [_stack(chunk, 0, k) for k in range(len(chunk[0][0]))]
            targets = [_stack(chunk, 1, k) for k in range(len(chunk[0][1]))]
            preds, trace = model.forward(params, state, inputs, mode="train")
            report = _batch_loss(preds, targets, params, cfg)
            if not np.isfinite(report.total):
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {opt_state.iteration + 1} "
                    f"(epoch {epoch})")
            grads = model.backward(params, trace, report.pred_grads)
            for name, g in report.wd_grads.items():
                grads[name] = grads[name] + (lam4 * g).astype(grads[name].dtype)
            sgd_step(params, grads, opt_state)
            history.append({
                "iter": opt_state.iteration, "epoch": epoch,
                "l2": report.l2_term, "ssim": report.ssim_term,
                "tv": report.tv_term, "wd": report.wd_term,
                "total": report.total,
            })
        opt_state.epoch = epoch + 1
    return params, opt_state, history
