"""Joint answer + mask training: loss, Adam, EMA shadow weights, the run loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .data import VOCAB, Sample, augment, batch_arrays
from .model import ModelConfig, ModelParams, baseline_forward, davi_forward, init_for_kind
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 3000
    mask_loss_weight: float = 1.0
    ema_decay: float = 0.999
    seed: int = 0
    eval_every: int = 0
    eval_samples: int = 0
    augment: bool = False  # palette permutation + left-right mirror of each drawn sample

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.ema_decay < 1:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.mask_loss_weight < 0:
            raise ValueError(f"mask_loss_weight must be >= 0, got {self.mask_loss_weight}")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 0:
            raise ValueError("batch_size must be >= 1; steps and eval_every >= 0")


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, dump_path: str | None = None):
        super().__init__(msg)
        self.dump_path = dump_path


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossBreakdown:
    total: Tensor
    answer: float
    bce: float
    dice: float

    def record(self) -> dict[str, float]:
        return {
            "loss_total": float(self.total.item()),
            "loss_ans": self.answer,
            "loss_bce": self.bce,
            "loss_dice": self.dice,
        }


def compute_loss(answer_logits, answer_target, mask_logits: Tensor, gt_mask, mask_weight: float = 1.0) -> LossBreakdown:
    """Mean token cross-entropy (PAD targets excluded) + λ·(BCE + Dice).

    ``answer_logits`` may be None for mask-only models. Dice is averaged over
    the samples of a batch.
    """
    gt_mask = np.asarray(gt_mask, dtype=float)
    terms = []
    ans = 0.0
    if answer_logits is not None:
        target = np.asarray(answer_target, dtype=np.int64)
        weights = target != VOCAB.pad
        if not weights.any():
            raise ValueError("answer target is entirely PAD")
        ce = T.cross_entropy(answer_logits, target, weights)
        ans = float(ce.item())
        terms.append(ce)
    bce = T.bce_with_logits(mask_logits, gt_mask)
    probs = T.sigmoid(mask_logits)
    if mask_logits.ndim == 3:
        dices = [T.dice_loss(T.select(probs, i), gt_mask[i]) for i in range(mask_logits.shape[0])]
        dice = dices[0]
        for d in dices[1:]:
            dice = dice + d
        dice = dice * (1.0 / len(dices))
    else:
        dice = T.dice_loss(probs, gt_mask)
    # kept in the graph even at λ=0 so every parameter still receives a (zero) gradient
    terms.append((bce + dice) * mask_weight)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossBreakdown(total, ans, float(bce.item()), float(dice.item()))


# ---------------------------------------------------------------------------
# optimiser and EMA


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> OptimizerState:
        return cls(
            {k: np.zeros_like(t.data) for k, t in params.items()},
            {k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(params: ModelParams, state: OptimizerState, cfg: TrainConfig, grads: dict[str, np.ndarray] | None = None) -> None:
    """Bias-corrected Adam, in place. Gradients default to each tensor's ``.grad``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for parameter {name}")
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data = (p.data - update).astype(p.data.dtype)


def ema_update(shadow: dict[str, np.ndarray], params: ModelParams | dict, decay: float) -> None:
    """shadow ← decay·shadow + (1−decay)·params, in place."""
    for name, s in shadow.items():
        p = params[name]
        p = p.data if isinstance(p, Tensor) else p
        if p.shape != s.shape:
            raise ValueError(f"EMA shape mismatch for {name}: {s.shape} vs {p.shape}")
        shadow[name] = decay * s + (1.0 - decay) * p


# ---------------------------------------------------------------------------
# training loop


def forward_loss(params: ModelParams, batch, mask_weight: float) -> LossBreakdown:
    images, q_ids, q_valid, a_ids, masks = batch
    if params.kind == "davi":
        out = davi_forward(params, images, q_ids, q_valid, answer_inputs=a_ids[:, :-1])
        return compute_loss(out.answer_logits, a_ids[:, 1:], out.mask_logits, masks, mask_weight)
    mask_logits = baseline_forward(params, images, q_ids, q_valid)
    return compute_loss(None, None, mask_logits, masks, mask_weight)


@dataclass
class TrainResult:
    checkpoint: ckpt_io.Checkpoint
    log: list[dict]


def _dump_batch(dump_dir, step: int, batch) -> str:
    path = Path(dump_dir) / f"nan_step{step}.npz"
    images, q_ids, q_valid, a_ids, masks = batch
    np.savez(path, step=step, images=images, q_ids=q_ids, q_valid=q_valid, a_ids=a_ids, masks=masks)
    return str(path)


def train(
    kind: str,
    train_samples: list[Sample],
    config: ModelConfig,
    tcfg: TrainConfig,
    val_samples: list[Sample] | None = None,
    log_path=None,
    dump_dir=".",
    callback: Callable[[int, ModelParams, dict], None] | None = None,
) -> TrainResult:
    """sample → forward → loss → backward → Adam → EMA, for ``tcfg.steps`` steps.

    Every random draw comes from ``seed``: parameter init uses it directly,
    batch sampling uses the derived stream ``[seed, 1]`` and augmentation
    ``[seed, 2]``.
    """
    from .evaluate import evaluate_params  # circular at import time

    tcfg.validate()
    if not train_samples:
        raise ValueError("empty training set")
    params = init_for_kind(kind, config, tcfg.seed)
    shadow = {k: t.data.astype(np.float64) for k, t in params.items()}
    state = OptimizerState.zeros(params)
    rng = np.random.default_rng([tcfg.seed, 1])
    aug_rng = np.random.default_rng([tcfg.seed, 2])
    records: list[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(rec):
        records.append(rec)
        if fh:
            fh.write(json.dumps(rec) + "\n")

    try:
        for step in range(1, tcfg.steps + 1):
            idx = rng.integers(0, len(train_samples), size=tcfg.batch_size)
            drawn = [train_samples[i] for i in idx]
            if tcfg.augment:
                drawn = [augment(s, aug_rng) for s in drawn]
            batch = batch_arrays(drawn, config.max_question_len, config.max_answer_len)
            params.zero_grad()
            try:
                loss = forward_loss(params, batch, tcfg.mask_loss_weight)
                if not math.isfinite(loss.total.item()):
                    raise T.NonFiniteError("loss is not finite")
                T.backward(loss.total)
            except T.NonFiniteError as exc:
                path = _dump_batch(dump_dir, step, batch)
                raise TrainingAborted(f"non-finite value at step {step}: {exc}", path) from exc
            adam_step(params, state, tcfg)
            ema_update(shadow, params, tcfg.ema_decay)
            emit({"step": step, **loss.record()})
            if callback is not None:
                callback(step, params, shadow)
            if val_samples and tcfg.eval_every and step % tcfg.eval_every == 0:
                ev = val_samples[: tcfg.eval_samples] if tcfg.eval_samples else val_samples
                ema_params = ModelParams(config, {k: Tensor(v) for k, v in shadow.items()}, kind)
                rep = evaluate_params([ema_params], ev)
                rec = {"step": step, "val_iou": rep.mean_iou}
                if rep.answer_accuracy is not None:
                    rec["val_acc"] = rep.answer_accuracy
                emit(rec)
                log.info("step %d val_iou %.2f val_acc %s", step, rep.mean_iou, rec.get("val_acc"))
    finally:
        if fh:
            fh.close()

    ck = ckpt_io.Checkpoint(
        kind=kind,
        config=config,
        live={k: t.data.astype(np.float64) for k, t in params.items()},
        ema={k: v.astype(np.float64) for k, v in shadow.items()},
        adam_m={k: v.astype(np.float64) for k, v in state.m.items()},
        adam_v={k: v.astype(np.float64) for k, v in state.v.items()},
        step=state.step,
        seed=tcfg.seed,
        extra={f"train.{k}": repr(v) for k, v in asdict(tcfg).items()},
    )
    return TrainResult(ck, records)
