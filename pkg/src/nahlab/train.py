"""Optimizers, schedules, and the two training procedures.

Pre-training minimizes the data MSE between predicted and true normalized
velocities. Fine-tuning is self-supervised: it never touches ground-truth
velocity, only the measured hologram pressure, which the prediction must
reproduce through the propagation operator. Optimizer math runs on the
stacked real/imaginary view of each complex parameter, with the true real
gradient (2 Re, 2 Im of the stored conjugate cotangent).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import ComplexField, NahError, Quantity, Sample, field_from_array
from .model import CvUnet, ScaleFactor, init_scale
from .propagate import Propagator


class ConfigError(NahError):
    """Unusable training configuration (empty split, bad sizes)."""


class NonFiniteGradient(NahError):
    """A gradient went non-finite; carries the parameter name."""


# ---------------------------------------------------------------------------
# Adam on the stacked real/imaginary view
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _real_view(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(-1).view(np.float64)


def adam_step(named_params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, real and imaginary parts independent.

    named_params: [(name, CTensor)], grads: matching complex cotangents.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for (name, p), g in zip(named_params, grads):
        if g is None:
            raise NonFiniteGradient(f"{name}: gradient missing")
        gr = _real_view(2.0 * np.ascontiguousarray(g, dtype=np.complex128))
        if not np.all(np.isfinite(gr)):
            raise NonFiniteGradient(f"{name}: non-finite gradient")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(gr)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(gr)
        m *= state.beta1
        m += (1.0 - state.beta1) * gr
        v *= state.beta2
        v += (1.0 - state.beta2) * gr * gr
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        _real_view(p.values)[...] -= update
    return named_params


@dataclass
class PlateauScheduler:
    """Multiply lr by factor after `patience` epochs without relative
    improvement; never below min_lr."""

    lr: float = 0.01
    factor: float = 0.1
    patience: int = 5
    min_lr: float = 0.0009
    threshold: float = 1e-4
    best: float = float("inf")
    stale: int = 0

    def update(self, metric: float) -> bool:
        """Feed one epoch's metric; returns True when the lr was reduced."""
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            new_lr = max(self.lr * self.factor, self.min_lr)
            if new_lr < self.lr:
                self.lr = new_lr
                return True
        return False


@dataclass
class EarlyStopper:
    patience: int = 20
    best: float = float("inf")
    stale: int = 0

    def update(self, metric: float) -> bool:
        """Feed one epoch's metric; returns True when training should stop."""
        if metric < self.best:
            self.best = metric
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    lr: float
    wall_time_s: float
    event: str = ""


@dataclass
class History:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def final_loss(self) -> float:
        return self.records[-1].train_loss

    def trajectory(self):
        """Wall-clock-free view used for determinism comparisons."""
        return [(r.epoch, r.train_loss, r.val_loss, r.lr, r.event)
                for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr",
                        "wall_time_s", "event"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss),
                            "" if r.val_loss is None else repr(r.val_loss),
                            repr(r.lr), f"{r.wall_time_s:.6f}", r.event])


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    lr0: float = 0.01
    batch_size: int = 32
    max_epochs: int = 200
    seed: int = 0
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    min_lr: float = 0.0009
    plateau_threshold: float = 1e-4
    early_stop_patience: int = 20


@dataclass
class TrainerState:
    """Everything needed to resume pre-training mid-run, deterministically.

    last_weights are the weights after the most recent epoch (the ones a
    resumed run continues from); the net returned by pretrain() itself holds
    the best-validation weights.
    """

    epoch: int
    adam: AdamState
    scheduler: PlateauScheduler
    stopper: EarlyStopper
    best_val: float
    best_weights: dict
    last_weights: dict


def _mean_val_loss(net, val_samples) -> float:
    total = 0.0
    for s in val_samples:
        vhat = net.forward(s.p_holo)
        d = vhat.values.reshape(-1) - s.v_src.vector
        total += float((d.real ** 2 + d.imag ** 2).mean())
    return total / len(val_samples)


def pretrain(net: CvUnet, dataset, cfg: PretrainConfig = PretrainConfig(),
             resume: TrainerState | None = None):
    """Supervised MSE training on the train split with plateau scheduling and
    early stopping on the val split; returns the best-validation weights.

    Returns (net, history, trainer_state).
    """
    train = dataset.subset("train")
    val = dataset.subset("val")
    if not train or not val:
        raise ConfigError("pretrain needs non-empty train and val splits")

    if resume is None:
        state = TrainerState(
            epoch=0, adam=AdamState(),
            scheduler=PlateauScheduler(
                lr=cfg.lr0, factor=cfg.plateau_factor,
                patience=cfg.plateau_patience, min_lr=cfg.min_lr,
                threshold=cfg.plateau_threshold),
            stopper=EarlyStopper(patience=cfg.early_stop_patience),
            best_val=float("inf"), best_weights=net.state_dict(),
            last_weights=net.state_dict(),
        )
    else:
        state = resume
        net.load_state(state.last_weights)

    params = net.parameters()
    history = History()
    while state.epoch < cfg.max_epochs:
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, state.epoch]).permutation(len(train))
        epoch_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[lo:lo + cfg.batch_size]]
            net.zero_grad()
            for s in batch:
                loss = ad.mse_loss(net.forward(s.p_holo),
                                   s.v_src.values.reshape(1, s.v_src.rows,
                                                          s.v_src.cols))
                ad.backward(loss)
                epoch_loss += loss.real_scalar()
            grads = [p.grad / len(batch) if p.grad is not None else None
                     for _, p in params]
            adam_step(params, grads, state.adam, state.scheduler.lr)
        net.zero_grad()
        train_loss = epoch_loss / len(train)
        if not np.isfinite(train_loss):
            raise NonFiniteGradient("training loss went non-finite")
        val_loss = _mean_val_loss(net, val)

        events = []
        if val_loss < state.best_val:
            state.best_val = val_loss
            state.best_weights = net.state_dict()
            events.append("best")
        lr_before = state.scheduler.lr
        if state.scheduler.update(val_loss):
            events.append(f"lr_drop:{state.scheduler.lr:g}")
        stop = state.stopper.update(val_loss)
        if stop:
            events.append("early_stop")
        history.append(EpochRecord(
            epoch=state.epoch, train_loss=train_loss, val_loss=val_loss,
            lr=lr_before, wall_time_s=time.perf_counter() - t0,
            event="+".join(events)))
        state.epoch += 1
        state.last_weights = net.state_dict()
        if stop:
            break

    net.load_state(state.best_weights)
    return net, history, state


# ---------------------------------------------------------------------------
# fine-tuning (self-supervised)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneInput:
    """The measurement-only view of a sample: no ground-truth velocity and no
    velocity normalization scalar can be reached through this interface."""

    id: str
    frequency: float
    p_holo: ComplexField
    norm_p: float

    @classmethod
    def from_sample(cls, s: Sample) -> "FinetuneInput":
        return cls(id=s.id, frequency=s.frequency, p_holo=s.p_holo,
                   norm_p=s.norm_p)

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency

    def physical_pressure(self) -> ComplexField:
        return field_from_array(self.p_holo.values * self.norm_p,
                                Quantity.Pressure)


@dataclass(frozen=True)
class FinetuneConfig:
    lr_net: float = 1e-3
    lr_c: float = 1e-5
    epochs: int = 2000
    physical_scale: bool = True   # compare pressures at physical scale


def finetune(net: CvUnet, sample: FinetuneInput, prop: Propagator,
             cfg: FinetuneConfig = FinetuneConfig()):
    """Physics-only adaptation on a single sample.

    Each epoch: predict velocity from the normalized hologram pressure,
    rescale by the trainable factor, propagate, and take the MAE against the
    measured pressure. Two separate Adam optimizers update the network and
    the scale factor; there is no early stopping and no schedule.

    Returns (net, ScaleFactor, history).
    """
    if abs(prop.omega - sample.omega) > 1e-9 * max(1.0, sample.omega):
        raise ConfigError(
            f"propagator omega {prop.omega} does not match sample "
            f"omega {sample.omega}")
    p_phys = sample.physical_pressure()
    scale = init_scale(net, p_phys, prop)
    target = p_phys.vector if cfg.physical_scale else sample.p_holo.vector

    params = net.parameters()
    c_param = [("C", scale.c)]
    adam_net = AdamState()
    adam_c = AdamState()
    history = History()
    p_in = sample.p_holo.values
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        vhat = net.forward(p_in)
        pred = ad.linear_apply(prop, ad.scale(vhat, scale.c))
        loss = ad.mae_loss(pred, target)
        ad.backward(loss)
        grads = [p.grad for _, p in params]
        adam_step(params, grads, adam_net, cfg.lr_net)
        adam_step(c_param, [scale.c.grad], adam_c, cfg.lr_c)
        net.zero_grad()
        scale.c.grad = None
        history.append(EpochRecord(
            epoch=epoch, train_loss=loss.real_scalar(), val_loss=None,
            lr=cfg.lr_net, wall_time_s=time.perf_counter() - t0))
    return net, scale, history


def predict(net: CvUnet, scale: ScaleFactor | None, sample) -> ComplexField:
    """Physical-scale velocity prediction C * net(p_holo); pure."""
    vhat = net.forward(sample.p_holo).values
    c = scale.value if scale is not None else 1.0 + 0.0j
    out = (c * vhat).reshape(net.config.out_rows, net.config.out_cols)
    return field_from_array(out, Quantity.NormalVelocity)


# ---------------------------------------------------------------------------
# trainer-state serialization (for resumable pre-training)
# ---------------------------------------------------------------------------

def save_trainer_state(path, state: TrainerState) -> None:
    arrays = {}
    for name, arr in state.adam.m.items():
        arrays[f"m::{name}"] = arr
    for name, arr in state.adam.v.items():
        arrays[f"v::{name}"] = arr
    for name, arr in state.best_weights.items():
        arrays[f"bw::{name}"] = arr
    for name, arr in state.last_weights.items():
        arrays[f"w::{name}"] = arr
    meta = {
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "scheduler": {k: getattr(state.scheduler, k) for k in
                      ("lr", "factor", "patience", "min_lr", "threshold",
                       "best", "stale")},
        "stopper": {k: getattr(state.stopper, k) for k in
                    ("patience", "best", "stale")},
        "best_val": state.best_val,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_trainer_state(path) -> TrainerState:
    data = np.load(path)
    meta = json.loads(bytes(data["meta"]).decode())
    adam = AdamState(step=meta["adam_step"])
    best_weights, last_weights = {}, {}
    for key in data.files:
        if key == "meta":
            continue
        kind, name = key.split("::", 1)
        if kind == "m":
            adam.m[name] = data[key]
        elif kind == "v":
            adam.v[name] = data[key]
        elif kind == "bw":
            best_weights[name] = data[key]
        elif kind == "w":
            last_weights[name] = data[key]
    sched = PlateauScheduler(**meta["scheduler"])
    stopper = EarlyStopper(**meta["stopper"])
    return TrainerState(epoch=meta["epoch"], adam=adam, scheduler=sched,
                        stopper=stopper, best_val=meta["best_val"],
                        best_weights=best_weights, last_weights=last_weights)
