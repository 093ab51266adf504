"""Multitask losses, RMSProp, learning-rate plateau schedule and training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, InputError, TrainingDivergedError
from .model import EGO_SCALE, BiPedModel, normalize_boxes
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
EGO_AUX_WEIGHT = 0.1
LOG_COLUMNS = ("epoch", "lr", "L_l", "L_a", "L_g", "L2", "total", "val_total", "val_ADE", "val_Acc")


@dataclass
class LossWeights:
    alpha: float = 0.6
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ContractError("loss weights must be nonnegative")


@dataclass
class TrainSchedule:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-4
    factor: float = 0.2
    patience: int = 10
    min_delta: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-7
    clip_norm: float | None = 5.0
    eval_every: int = 1
    keep_best: bool = True

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ContractError(f"plateau factor must lie in (0, 1), got {self.factor}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ContractError("epochs, batch_size and eval_every must be positive")


# -- losses ---------------------------------------------------------------
def logcosh_loss(pred, target):
    """Sum of log(cosh(pred - target)) over every element."""
    pred = T.as_tensor(pred)
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"logcosh_loss: shapes {pred.shape} and {target.shape} differ")
    return T.logcosh_elem(pred - target).sum()


def _labels(label, n):
    y = np.asarray(label)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise InputError(f"labels must be 0 or 1, got {np.unique(y).tolist()}")
    return y.astype(np.float64)


def weighted_bce(prob, label, pos_weight=1.0):
    """-sum(w_pos * y * log p + (1 - y) * log(1 - p)) with p clamped."""
    prob = T.as_tensor(prob)
    y = _labels(label, prob.shape[0])
    p = T.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos = T.log(p) * (pos_weight * y)
    neg = T.log(1.0 - p) * (1.0 - y)
    return -(pos + neg).sum()


def grid_ce(dist, label):
    """-sum(log dist[label]) with the same clamp as weighted_bce."""
    dist = T.as_tensor(dist)
    idx = np.asarray(label)
    if dist.ndim != 2 or idx.shape != (dist.shape[0],):
        raise DimensionError(f"grid_ce: dist {dist.shape} vs labels {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= dist.shape[1]):
        raise InputError(f"grid labels must lie in [0, {dist.shape[1]})")
    p = T.clip(T.pick(dist, idx), PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -T.log(p).sum()


def combine_losses(l_traj, l_act, l_grid, weights, l2=0.0):
    total = l_traj * weights.alpha + l_act * weights.beta
    if l_grid is not None:
        total = total + l_grid * weights.gamma
    return total + l2


def class_weight(labels):
    """Positive-class weight N_neg / N_pos over a whole split (1 when undefined)."""
    y = np.asarray(labels)
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    return neg / pos if pos and neg else 1.0


@dataclass
class LossTerms:
    L_l: Tensor
    L_a: Tensor
    L_g: Tensor | None
    L2: Tensor
    L_ego: Tensor | None
    total: Tensor

    def values(self):
        def v(t):
            return float("nan") if t is None else float(t.data)

        return {"L_l": v(self.L_l), "L_a": v(self.L_a), "L_g": v(self.L_g), "L2": v(self.L2),
                "L_ego": v(self.L_ego), "total": v(self.total)}


def total_loss(bundle, targets, weights, model=None, pos_weight=1.0, l2=True):
    """Weighted multitask loss on fused outputs plus L2 and planner terms."""
    target_boxes = normalize_boxes(targets.future_boxes, bundle.anchor, bundle.scale)
    l_traj = logcosh_loss(bundle.boxes, target_boxes)
    l_act = weighted_bce(bundle.action, targets.crossing, pos_weight)
    l_grid = grid_ce(bundle.grid, targets.final_grid) if bundle.grid is not None else None
    l2_term = model.params.l2_penalty() if (model is not None and l2) else Tensor(0.0)
    total = combine_losses(l_traj, l_act, l_grid, weights, l2_term)
    l_ego = None
    if bundle.ego_pred is not None:
        l_ego = logcosh_loss(bundle.ego_pred, targets.future_ego * EGO_SCALE)
        total = total + l_ego * EGO_AUX_WEIGHT
    return LossTerms(l_traj, l_act, l_grid, l2_term, l_ego, total)


# -- optimisation ---------------------------------------------------------
class RMSProp:
    """v <- rho v + (1 - rho) g^2 ;  p <- p - lr g / (sqrt(v) + eps)."""

    def __init__(self, params, lr=1e-4, rho=0.9, eps=1e-7):
        self.params = list(params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.square_avg = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        for k, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                raise ContractError(f"no gradient for parameter {p.name or k!r}")
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {p.name!r} has shape {g.shape}, expected {p.shape}")
            v = self.square_avg[k]
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            p.data = p.data - self.lr * g / (np.sqrt(v) + self.eps)


def rmsprop_step(state, params, grads):
    """Functional form: ``state`` is an RMSProp whose params are ``params``."""
    if [id(p) for p in state.params] != [id(p) for p in params]:
        raise ContractError("optimizer state does not belong to these parameters")
    state.step(grads)
    return params


def clip_grad_norm(grads, max_norm):
    """Rescale gradients in place so their global L2 norm is at most max_norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` stale checks."""

    def __init__(self, optimizer, factor=0.2, patience=10, min_delta=1e-4, min_lr=0.0):
        self.optimizer = optimizer
        self.factor, self.patience, self.min_delta, self.min_lr = factor, patience, min_delta, min_lr
        self.best = math.inf
        self.stale = 0

    def step(self, metric):
        if metric < self.best - self.min_delta:
            self.best = metric
            self.stale = 0
            return False
        self.stale += 1
        if self.stale > self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.stale = 0
            return True
        return False


# -- training loop ------------------------------------------------------------
def _batches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def forward_samples(model, dataset, samples, **kw):
    maps = dataset.maps_batch(samples) if model.config.use_cim else None
    batch, targets = model.make_batch(samples, maps)
    return model.forward(batch, **kw), targets


def _check_finite(terms, epoch, step):
    for name, value in terms.values().items():
        if name in ("L_g", "L_ego") and getattr(terms, name) is None:
            continue
        if not math.isfinite(value):
            raise TrainingDivergedError(name, epoch, step)


def evaluate_loss(model, dataset, samples, weights, pos_weight, batch_size=32):
    totals = {"L_l": 0.0, "L_a": 0.0, "L_g": 0.0, "total": 0.0}
    with no_grad():
        for idx in _batches(len(samples), batch_size):
            chunk = [samples[i] for i in idx]
            bundle, targets = forward_samples(model, dataset, chunk)
            terms = total_loss(bundle, targets, weights, model, pos_weight, l2=False)
            for k, v in terms.values().items():
                if k in totals and math.isfinite(v):
                    totals[k] += v
    totals["total"] += float(model.params.l2_penalty().data)
    return totals


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    pos_weight: float = 1.0

    def totals(self):
        return [r["total"] for r in self.rows]

    def lrs(self):
        return [r["lr"] for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(row.get(k)) for k in LOG_COLUMNS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def fit(model: BiPedModel, train, val, schedule=TrainSchedule(), seed=0, weights=LossWeights(),
        callback=None):
    """Train ``model`` in place on Dataset ``train``; validate on ``val``.

    Returns a TrainingLog. With ``schedule.keep_best`` the parameters with
    the lowest validation total are restored at the end.
    """
    from .metrics import ade_fde, classification_metrics

    if len(train) == 0 or len(val) == 0:
        raise ContractError("fit needs non-empty train and validation splits")
    rng = np.random.default_rng(seed)
    train_samples, val_samples = list(train), list(val)
    pos_weight = class_weight([s.crossing for s in train_samples])
    params = list(model.params)
    opt = RMSProp(params, schedule.lr, schedule.rho, schedule.eps)
    sched = PlateauScheduler(opt, schedule.factor, schedule.patience, schedule.min_delta)
    out = TrainingLog(pos_weight=pos_weight)
    best_state = model.params.state_dict()

    for epoch in range(1, schedule.epochs + 1):
        sums = {"L_l": 0.0, "L_a": 0.0, "L_g": 0.0, "L2": 0.0, "total": 0.0}
        lr_epoch = opt.lr
        for step, idx in enumerate(_batches(len(train_samples), schedule.batch_size, rng)):
            chunk = [train_samples[i] for i in idx]
            bundle, targets = forward_samples(model, train, chunk)
            terms = total_loss(bundle, targets, weights, model, pos_weight)
            _check_finite(terms, epoch, step)
            model.params.zero_grad()
            grads = T.backward(terms.total)
            if schedule.clip_norm is not None:
                clip_grad_norm(grads, schedule.clip_norm)
            opt.step(grads)
            for k, v in terms.values().items():
                if k in sums and math.isfinite(v):
                    sums[k] += v
        row = {"epoch": epoch, "lr": lr_epoch, **sums,
               "val_total": None, "val_ADE": None, "val_Acc": None}
        if epoch % schedule.eval_every == 0 or epoch == schedule.epochs:
            vl = evaluate_loss(model, val, val_samples, weights, pos_weight)
            pred = predict(model, val, val_samples)
            truth = np.stack([s.future_boxes for s in val_samples])
            labels = np.array([s.crossing for s in val_samples])
            row["val_total"] = vl["total"]
            row["val_ADE"] = ade_fde(pred["boxes"], truth)[0]
            row["val_Acc"] = classification_metrics(pred["action"], labels)["Acc"]
            if not math.isfinite(vl["total"]):
                raise TrainingDivergedError("val_total", epoch, -1)
            if vl["total"] < out.best_val:
                out.best_val = vl["total"]
                out.best_epoch = epoch
                best_state = model.params.state_dict()
            sched.step(vl["total"])
        out.rows.append(row)
        log.info("epoch %d lr %.3g total %.5g val %s", epoch, lr_epoch, sums["total"], row["val_total"])
        if callback is not None:
            callback(row)
    if schedule.keep_best:
        model.params.load_state_dict(best_state)
    return out


def predict(model, dataset, samples, batch_size=32):
    """Fused predictions in pixels: dict of boxes (N x tau x 4), action (N), grid."""
    boxes, action, grid = [], [], []
    with no_grad():
        for idx in _batches(len(samples), batch_size):
            chunk = [samples[i] for i in idx]
            bundle, _ = forward_samples(model, dataset, chunk)
            boxes.append(bundle.boxes_pixels())
            action.append(bundle.action.data.copy())
            if bundle.grid is not None:
                grid.append(bundle.grid.data.copy())
    return {
        "boxes": np.concatenate(boxes),
        "action": np.concatenate(action),
        "grid": np.concatenate(grid) if grid else None,
    }
