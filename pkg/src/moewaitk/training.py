"""Adam, the training loop and the system variants it can run.

Systems:

* ``standard_waitk``: vanilla cross-attention, fixed ``k_train``
  (``k_train = inf`` gives an offline model).
* ``multipath_waitk``: vanilla cross-attention, k sampled per batch.
* ``moe_equal_weight``: expert laggings, weights frozen at 1/h.
* ``moe_one_stage``: expert laggings, gate trained from the start.
* ``moe_two_stage``: equal-weight pre-training for ``stage1_fraction`` of
  the updates, then gates re-initialised to zero and trained jointly with
  a fresh optimizer.

All randomness is derived from ``(seed, epoch)`` or ``(seed, update)``, so a
run resumed from a stage-1 checkpoint replays the uninterrupted run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import make_batches, collate
from .model import ModelConfig, Transformer
from .policy import UNBOUNDED, check_lagging, format_lagging, sample_multipath_k

log = logging.getLogger(__name__)

SYSTEMS = ("standard_waitk", "multipath_waitk", "moe_equal_weight", "moe_one_stage", "moe_two_stage")
VAL_LAGGINGS = (1, 3, 5, 7, UNBOUNDED)


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    system: str = "moe_two_stage"
    k_train: object = None
    total_updates: int = 4000
    stage1_fraction: float = 0.7
    batch_size: int = 64
    lr: float = 5e-4
    warmup: int = 400
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9
    clip_norm: float = 1.0
    seed: int = 1
    label_smoothing: float = 0.1
    eval_every: int = 500
    val_size: int = 500
    max_skipped: int = 50

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}; choose from {', '.join(SYSTEMS)}")
        if self.system == "standard_waitk":
            if self.k_train is None:
                raise ValueError("standard_waitk needs k_train")
            self.k_train = check_lagging(self.k_train)
        if not 0.0 <= self.stage1_fraction <= 1.0:
            raise ValueError("stage1_fraction must be in [0, 1]")
        self.betas = tuple(self.betas)

    @property
    def stage1_updates(self):
        if self.system != "moe_two_stage":
            return 0
        return int(round(self.stage1_fraction * self.total_updates))


def system_model_config(system, model_config):
    """Baselines use vanilla attention: every head sees everything the policy has read."""
    if system in ("standard_waitk", "multipath_waitk"):
        return replace(model_config, expert_lagging=[UNBOUNDED] * model_config.num_heads)
    return model_config


def inverse_sqrt_lr(update, base_lr, warmup):
    """Linear warmup to ``base_lr`` then decay with 1/sqrt(update)."""
    update = max(update, 1)
    if warmup <= 0:
        return base_lr
    return base_lr * min(update / warmup, math.sqrt(warmup / update))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def adam_step(params, grads, state, lr, betas=(0.9, 0.98), eps=1e-9, clip_norm=None):
    """One bias-corrected Adam update, in place.

    ``params`` and ``grads`` map names to arrays; parameters without a
    gradient are left alone. Returns False (and changes nothing) when a
    gradient is non-finite.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        return False
    scale = 1.0
    if clip_norm and norm > clip_norm:
        scale = clip_norm / (norm + 1e-6)
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, g in grads.items():
        if g is None:
            continue
        g = g * scale if scale != 1.0 else g
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return True


def validation_loss(model, pairs, laggings, mode, batch_size=250):
    if not pairs:
        return float("nan")
    total = count = 0.0
    for k in laggings:
        for start in range(0, len(pairs), batch_size):
            batch = collate(pairs[start:start + batch_size])
            losses = model.sentence_losses(batch, k, mode) * batch.target_lens
            total += float(losses.sum())
            count += float(batch.target_lens.sum())
    return total / count


def train_step(model, batch, k, mode, rng, cfg, opt, lr):
    model.zero_grad()
    with T.recording() as tape:
        loss = model.loss(batch, k, mode, rng, cfg.label_smoothing)
        if not math.isfinite(loss.item()):
            tape.clear()
            return loss.item(), False
        T.backward(loss)
    tape.clear()
    grads = {n: p.grad for n, p in model.params.items() if p.grad is not None}
    params = {n: p.data for n, p in model.params.items()}
    ok = adam_step(params, grads, opt, lr, cfg.betas, cfg.eps, cfg.clip_norm)
    return loss.item(), ok


def _batches(pairs, cfg):
    epoch = 0
    while True:
        for batch in make_batches(pairs, cfg.batch_size, np.random.default_rng([cfg.seed, 1, epoch])):
            yield batch
        epoch += 1


def run_training(cfg, model_config, train_pairs, valid_pairs=(), resume=None, on_stage1_end=None,
                 log_lines=None):
    """Train the configured system; returns ``(model, log_lines)``.

    Each log line is ``update<TAB>loss<TAB>val_loss<TAB>k_sampled<TAB>stage``;
    update 0 records the validation loss at initialisation.
    """
    if not train_pairs:
        raise ValueError("empty training corpus")
    mc = system_model_config(cfg.system, model_config)
    valid_pairs = list(valid_pairs)[: cfg.val_size]
    s1 = cfg.stage1_updates
    lines = [] if log_lines is None else log_lines

    if resume is not None:
        model = resume
        start = int(model.meta.get("update", 0))
    else:
        model = Transformer(mc, seed=cfg.seed)
        start = 0
    model.meta.update({"system": cfg.system, "seed": cfg.seed,
                       "k_train": format_lagging(cfg.k_train) if cfg.k_train is not None else None})

    def mode_at(update):
        if cfg.system == "moe_one_stage":
            return "gated"
        if cfg.system == "moe_two_stage" and update > s1:
            return "gated"
        return "equal"

    def stage_at(update):
        if cfg.system != "moe_two_stage":
            return "single"
        return "ft" if update > s1 else "stage1"

    def val(update):
        lags = (cfg.k_train,) if cfg.system == "standard_waitk" else VAL_LAGGINGS
        return validation_loss(model, valid_pairs, lags, mode_at(max(update, 1)))

    if start == 0:
        model.stage = stage_at(1)
        model.meta["mode"] = mode_at(1)
        lines.append(f"0\t-\t{val(0):.6f}\t-\t{model.stage}")

    opt = AdamState()
    skipped = 0
    batches = _batches(train_pairs, cfg)
    for _ in range(start):
        next(batches)
    for update in range(start + 1, cfg.total_updates + 1):
        if cfg.system == "moe_two_stage" and update == s1 + 1:
            model.reset_gates()
            opt = AdamState()
        batch = next(batches)
        rng = np.random.default_rng([cfg.seed, 2, update])
        if cfg.system == "standard_waitk":
            k = cfg.k_train
        else:
            k = sample_multipath_k(rng, int(batch.source_lens.max()))
        mode = mode_at(update)
        lr = inverse_sqrt_lr(update, cfg.lr, cfg.warmup)
        loss, ok = train_step(model, batch, k, mode, rng, cfg, opt, lr)
        if not ok:
            skipped += 1
            log.warning("update %d: non-finite gradient, step skipped (%d so far)", update, skipped)
            if skipped > cfg.max_skipped:
                raise NumericError(f"{skipped} updates skipped for non-finite gradients")
        model.stage = stage_at(update)
        model.meta["update"] = update
        model.meta["mode"] = mode
        model.meta["skipped"] = skipped
        vl = "-"
        if valid_pairs and (update % cfg.eval_every == 0 or update == cfg.total_updates):
            v = val(update)
            if not math.isfinite(v):
                raise NumericError(f"non-finite validation loss at update {update}")
            vl = f"{v:.6f}"
        lines.append(f"{update}\t{loss:.6f}\t{vl}\t{format_lagging(k)}\t{model.stage}")
        if on_stage1_end is not None and update == s1 and s1 < cfg.total_updates:
            on_stage1_end(model)
    if cfg.system == "moe_two_stage" and s1 >= cfg.total_updates:
        model.meta["mode"] = "equal"
    return model, lines
