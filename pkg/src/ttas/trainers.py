"""Training procedures: TTAS, the Teacher-Student baseline and supervised-only.

All three share plain SGD and an elementwise EMA. Parameters are updated in
place; only ``ema_update`` ever writes to the teacher in the semi-supervised
methods.
"""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import segnet
from . import tensor as T
from .losses import (
    PSEUDO_MODES,
    TauSchedule,
    dice_loss,
    kl_loss,
    make_pseudo_labels,
    tau_at_epoch,
)
from .segnet import ModelTriplet, NetworkArchitecture, ParameterSet
from .tensor import Tensor

logger = logging.getLogger(__name__)

METHODS = ("ttas", "ts", "supervised")
SCHEDULES = ("paired", "sequential", "interleaved")


class MissingGradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "ttas"
    alpha: float = 0.05
    gamma: float = 0.99
    tau_schedule: TauSchedule = field(default_factory=TauSchedule)
    pseudo_mode: str = "two_sided"
    epochs: int = 60
    batch_size: int = 4
    seed: int = 0
    # None means "same as alpha"; 0 freezes Step 3
    student_alpha: float | None = None
    # paired: each iteration runs Steps 1-3 once, cycling the labeled set;
    # sequential: every unlabeled batch, then one pass over the labeled set;
    # interleaved: alternate the two, one labeled pass
    schedule: str = "paired"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.pseudo_mode not in PSEUDO_MODES:
            raise ValueError(f"unknown pseudo_mode {self.pseudo_mode!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.student_alpha is not None and self.student_alpha < 0:
            raise ValueError("student_alpha must be >= 0")

    @property
    def effective_student_alpha(self) -> float:
        return self.alpha if self.student_alpha is None else self.student_alpha

    def tau(self, epoch: int) -> float:
        sched = self.tau_schedule
        if sched.kind == "linear_ramp" and sched.total_epochs != self.epochs:
            sched = TauSchedule(sched.kind, sched.tau_start, sched.tau_end, self.epochs)
        if sched.kind == "constant":
            return sched.tau_start
        return tau_at_epoch(sched, epoch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        d = dict(d)
        d["tau_schedule"] = TauSchedule(**d["tau_schedule"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    labeled_loss: float
    ta_loss: float
    kept_fraction: float
    skipped_batches: int
    val_dice: float


@dataclass
class TrainState:
    models: ModelTriplet
    method: str
    epoch: int = 0
    iteration: int = 0
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def inference_params(self) -> ParameterSet:
        return self.models.student if self.method == "supervised" else self.models.teacher


def derive_rng(seed: int, *stage: str) -> np.random.Generator:
    """Independent stream keyed by (seed, stage names)."""
    keys = [zlib.crc32(s.encode("utf-8")) for s in stage]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *keys]))


def init_state(arch: NetworkArchitecture, cfg: TrainConfig) -> TrainState:
    """Teacher, assistant and student all start as clones of one seeded init."""
    init_seed = int(derive_rng(cfg.seed, "init").integers(2 ** 63))
    models = ModelTriplet.from_init(arch, init_seed)
    rngs = {"labeled": derive_rng(cfg.seed, "shuffle", "labeled"),
            "unlabeled": derive_rng(cfg.seed, "shuffle", "unlabeled")}
    return TrainState(models=models, method=cfg.method, rngs=rngs)


# update primitives -----------------------------------------------------------

def sgd_step(params: ParameterSet, alpha: float) -> None:
    """w <- w - alpha * grad(w), then clear gradients."""
    pairs = list(params.items())
    missing = [n for n, t in pairs if t.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for {missing}")
    for _, t in pairs:
        t.data = t.data - alpha * t.grad
        t.grad = None


def ema_update(target: Mapping[str, Tensor], source: Mapping[str, Tensor], gamma: float) -> None:
    """target <- gamma * target + (1 - gamma) * source, elementwise."""
    if list(target) != list(source):
        raise ValueError(f"EMA name mismatch: {sorted(target)} vs {sorted(source)}")
    for name, t in target.items():
        s = source[name]
        if t.shape != s.shape:
            raise ValueError(f"EMA shape mismatch for {name}: {t.shape} vs {s.shape}")
        mixed = gamma * t.data + (1.0 - gamma) * s.data
        # the exact mix lies between its inputs; clip away the rounding that can leave it
        t.data = np.clip(mixed, np.minimum(t.data, s.data), np.maximum(t.data, s.data))


# batching --------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    if n == 0:
        return []
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _epoch_plan(n_unlabeled: int, n_labeled: int, cfg: TrainConfig,
                rngs: dict[str, np.random.Generator]) -> list[tuple[str, np.ndarray]]:
    """Ordered ("u" | "l", example indices) steps for one epoch."""
    u = _batches(n_unlabeled, cfg.batch_size, rngs["unlabeled"])
    lab = _batches(n_labeled, cfg.batch_size, rngs["labeled"])
    if cfg.schedule == "sequential":
        return [("u", b) for b in u] + [("l", b) for b in lab]
    if cfg.schedule == "paired":
        # cycle the labeled set, reshuffling per pass, until it matches the unlabeled count
        one_pass = len(lab)
        while len(lab) < len(u):
            lab += _batches(n_labeled, cfg.batch_size, rngs["labeled"])
        lab = lab[:max(len(u), one_pass)]
    plan = []
    for i in range(max(len(u), len(lab))):
        if i < len(u):
            plan.append(("u", u[i]))
        if i < len(lab):
            plan.append(("l", lab[i]))
    return plan


def _as_labeled(labeled) -> tuple[np.ndarray, np.ndarray]:
    images, masks = labeled
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("labeled set is empty")
    if images.shape[0] != masks.shape[0] or images.shape[2:] != masks.shape[2:]:
        raise ValueError(f"labeled images {images.shape} and masks {masks.shape} disagree")
    return images, masks


def _as_unlabeled(unlabeled) -> np.ndarray:
    if unlabeled is None:
        return np.zeros((0, 1, 1, 1))
    return np.asarray(unlabeled, dtype=np.float64)


def _labeled_step(state: TrainState, x: np.ndarray, y: np.ndarray, alpha: float) -> float:
    student = state.models.student
    probs = segnet.forward(student, x, state.models.architecture)
    loss = dice_loss(y, probs)
    T.backward(loss)
    sgd_step(student, alpha)
    state.iteration += 1
    return loss.item()


def _teacher_follow(state: TrainState, gamma: float) -> None:
    m = state.models
    ema_update(m.teacher.f_params, m.student.f_params, gamma)
    ema_update(m.teacher.g_params, m.student.g_params, gamma)


def _validation_dice(state: TrainState, images: np.ndarray, masks: np.ndarray, batch_size: int) -> float:
    inter = total = 0.0
    for i in range(0, images.shape[0], batch_size):
        pred = predict(state, images[i:i + batch_size]).data > 0.5
        gt = masks[i:i + batch_size] > 0.5
        inter += float(np.sum(pred & gt))
        total += float(pred.sum() + gt.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def _finish_epoch(state, labeled_losses, ta_losses, kept, seen, skipped, images, masks, cfg, validation):
    vx, vy = validation if validation is not None else (images, masks)
    state.history.append(EpochRecord(
        epoch=state.epoch,
        labeled_loss=float(np.mean(labeled_losses)) if labeled_losses else 0.0,
        ta_loss=float(np.mean(ta_losses)) if ta_losses else 0.0,
        kept_fraction=(kept / seen) if seen else 0.0,
        skipped_batches=skipped,
        val_dice=_validation_dice(state, np.asarray(vx, dtype=np.float64), np.asarray(vy, dtype=np.float64),
                                  cfg.batch_size),
    ))
    state.epoch += 1
    return state


# epochs ----------------------------------------------------------------------

def ttas_epoch(state: TrainState, labeled, unlabeled, cfg: TrainConfig, validation=None) -> TrainState:
    """One TTAS epoch.

    Unlabeled batches: teacher pseudo-labels, assistant SGD on the masked KL
    loss, then student.f <- EMA(assistant.f). Labeled batches: student SGD on
    Dice, then teacher.f and teacher.g <- EMA(student). The student's predictor
    never receives anything from the assistant.
    """
    images, masks = _as_labeled(labeled)
    u_images = _as_unlabeled(unlabeled)
    m = state.models
    arch = m.architecture
    tau = cfg.tau(state.epoch)
    labeled_losses, ta_losses = [], []
    kept = seen = skipped = 0
    for kind, idx in _epoch_plan(u_images.shape[0], images.shape[0], cfg, state.rngs):
        if kind == "u":
            xb = u_images[idx]
            with T.no_grad():
                teacher_probs = segnet.forward(m.teacher, xb, arch)
            pseudo = make_pseudo_labels(teacher_probs, tau, cfg.pseudo_mode)
            kept += pseudo.kept
            seen += pseudo.keep_mask.size
            if pseudo.kept == 0:
                skipped += 1
                logger.debug("epoch %d: pseudo-label batch fully ignored", state.epoch)
                continue
            probs = segnet.forward(m.assistant, xb, arch)
            loss = kl_loss(pseudo.soft_labels, probs, pseudo.keep_mask)
            T.backward(loss)
            sgd_step(m.assistant, cfg.alpha)
            ema_update(m.student.f_params, m.assistant.f_params, cfg.gamma)
            ta_losses.append(loss.item())
        else:
            labeled_losses.append(_labeled_step(state, images[idx], masks[idx], cfg.effective_student_alpha))
            _teacher_follow(state, cfg.gamma)
    return _finish_epoch(state, labeled_losses, ta_losses, kept, seen, skipped, images, masks, cfg, validation)


def ts_epoch(state: TrainState, labeled, unlabeled, cfg: TrainConfig, validation=None) -> TrainState:
    """Conventional Teacher-Student epoch.

    The student learns from ground truth and from the teacher's confident
    pseudo-labels hardened at 0.5 (Dice on kept voxels); after every student
    update the whole teacher follows by EMA.
    """
    images, masks = _as_labeled(labeled)
    u_images = _as_unlabeled(unlabeled)
    m = state.models
    arch = m.architecture
    tau = cfg.tau(state.epoch)
    alpha = cfg.effective_student_alpha
    labeled_losses, pseudo_losses = [], []
    kept = seen = skipped = 0
    for kind, idx in _epoch_plan(u_images.shape[0], images.shape[0], cfg, state.rngs):
        if kind == "u":
            xb = u_images[idx]
            with T.no_grad():
                teacher_probs = segnet.forward(m.teacher, xb, arch)
            pseudo = make_pseudo_labels(teacher_probs, tau, cfg.pseudo_mode)
            kept += pseudo.kept
            seen += pseudo.keep_mask.size
            if pseudo.kept == 0:
                skipped += 1
                continue
            hard = (pseudo.soft_labels > 0.5).astype(np.float64)
            probs = segnet.forward(m.student, xb, arch)
            loss = dice_loss(hard, probs, mask=pseudo.keep_mask)
            T.backward(loss)
            sgd_step(m.student, alpha)
            state.iteration += 1
            _teacher_follow(state, cfg.gamma)
            pseudo_losses.append(loss.item())
        else:
            labeled_losses.append(_labeled_step(state, images[idx], masks[idx], alpha))
            _teacher_follow(state, cfg.gamma)
    return _finish_epoch(state, labeled_losses, pseudo_losses, kept, seen, skipped, images, masks, cfg, validation)


def supervised_epoch(state: TrainState, labeled, cfg: TrainConfig, validation=None,
                     teacher_ema: bool = False) -> TrainState:
    """Dice-only SGD on the student slot.

    ``teacher_ema`` additionally lets the teacher follow the student by EMA;
    it is the control run for the degenerate-equivalence checks and is off for
    the supervised baseline proper.
    """
    images, masks = _as_labeled(labeled)
    losses = []
    for _, idx in _epoch_plan(0, images.shape[0], cfg, state.rngs):
        losses.append(_labeled_step(state, images[idx], masks[idx], cfg.effective_student_alpha))
        if teacher_ema:
            _teacher_follow(state, cfg.gamma)
    return _finish_epoch(state, losses, [], 0, 0, 0, images, masks, cfg, validation)


def run_epoch(state: TrainState, labeled, unlabeled, cfg: TrainConfig, validation=None) -> TrainState:
    if cfg.method == "ttas":
        return ttas_epoch(state, labeled, unlabeled, cfg, validation)
    if cfg.method == "ts":
        return ts_epoch(state, labeled, unlabeled, cfg, validation)
    return supervised_epoch(state, labeled, cfg, validation)


def train(arch: NetworkArchitecture, cfg: TrainConfig, labeled, unlabeled=None, validation=None,
          state: TrainState | None = None, until_epoch: int | None = None) -> TrainState:
    """Run (or resume) training up to ``until_epoch`` (default ``cfg.epochs``)."""
    if state is None:
        state = init_state(arch, cfg)
    stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    while state.epoch < stop:
        run_epoch(state, labeled, unlabeled, cfg, validation)
        rec = state.history[-1]
        logger.info("%s epoch %d: loss %.4f ta %.4f kept %.3f val_dice %.4f", cfg.method, rec.epoch,
                    rec.labeled_loss, rec.ta_loss, rec.kept_fraction, rec.val_dice)
    return state


def predict(state: TrainState, batch) -> Tensor:
    """Probabilities from the inference model (teacher, or student for supervised)."""
    with T.no_grad():
        return segnet.forward(state.inference_params, batch, state.models.architecture)


# checkpointing ---------------------------------------------------------------

def save_state(path, state: TrainState, cfg: TrainConfig | None = None) -> None:
    tensors = {}
    for role, ps in state.models.members().items():
        tensors.update(segnet.params_to_arrays(ps, prefix=f"{role}/"))
    meta = {
        "method": state.method,
        "epoch": state.epoch,
        "iteration": state.iteration,
        "rng_state": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "history": [asdict(r) for r in state.history],
        "config": cfg.to_dict() if cfg is not None else None,
        "config_hash": cfg.digest() if cfg is not None else None,
    }
    Path(path).write_bytes(segnet.dumps_checkpoint(state.models.architecture, tensors, meta))


def load_state(path) -> tuple[TrainState, TrainConfig | None]:
    arch, tensors, meta = segnet.loads_checkpoint(Path(path).read_bytes())
    if meta is None:
        raise segnet.CheckpointFormatError("checkpoint has no training-state metadata")
    members = {role: segnet.params_from_arrays(tensors, prefix=f"{role}/")
               for role in ("teacher", "assistant", "student")}
    models = ModelTriplet(architecture=arch, **members)
    models.validate()
    rngs = {}
    for k, st in meta["rng_state"].items():
        g = np.random.Generator(np.random.PCG64())
        g.bit_generator.state = st
        rngs[k] = g
    state = TrainState(models=models, method=meta["method"], epoch=meta["epoch"],
                       iteration=meta["iteration"], rngs=rngs,
                       history=[EpochRecord(**r) for r in meta["history"]])
    cfg = TrainConfig.from_dict(meta["config"]) if meta.get("config") else None
    return state, cfg
