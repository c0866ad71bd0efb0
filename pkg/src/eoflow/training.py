"""Training loop: minibatch sampling, noise inflation, composite loss, AdamW steps.

Each step draws its batch, noise and TC index assignment from generators
seeded by ``(seed, stream, step)``, so a resumed run replays exactly the
batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datasets import Dataset, inflate
from .errors import CheckpointError, NumericalError
from .flow import FlowModel, load_checkpoint, save_checkpoint
from .losses import CORE_DETAIL, DENSE, STOCHASTIC, TOTAL, mml_loss
from .optim import AdamState, adam_step, clip_by_norm

__all__ = ["TrainConfig", "TrainLog", "adam_step", "sample_tc_indices", "learning_rate", "train"]

LOG_COLUMNS = ("step", "l_ml", "l_tc", "composite", "grad_norm", "ms_per_step")
CORE_DETAIL_COLUMNS = ("l_core", "l_detail", "l_cd_mmi")
CHECKPOINT_NAME = "model.eofl"
OPTIMIZER_NAME = "optimizer.npz"
LOG_NAME = "train_log.csv"

_BATCH_STREAM, _NOISE_STREAM, _TC_STREAM = 0, 1, 2


@dataclass
class TrainConfig:
    batch_size: int = 256
    steps: int = 1000
    lr: float = 1e-3
    warmup: int = 100
    lr_decay: str = "constant"
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    mode: str = TOTAL
    weights: dict = field(default_factory=dict)
    estimator: str = DENSE
    core_size: int | None = None
    noise_sigma: float = 0.0
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    grad_clip: float | None = 100.0
    track_tc: bool = True

    def validate(self, dim: int) -> "TrainConfig":
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.lr <= 0 or self.warmup < 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive; warmup and weight_decay non-negative")
        if self.mode not in (TOTAL, CORE_DETAIL):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.estimator not in (DENSE, STOCHASTIC):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.estimator == STOCHASTIC and self.batch_size < dim:
            raise ValueError(f"stochastic estimator needs batch_size >= D ({self.batch_size} < {dim})")
        if any(v < 0 for v in self.weights.values()):
            raise ValueError("loss weights must be non-negative")
        if self.lr_decay not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        return self


@dataclass
class TrainLog:
    """Append-only per-step records."""

    records: list = field(default_factory=list)

    def append(self, **row):
        if self.records and row["step"] <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append(row)

    def __len__(self):
        return len(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([r.get(name, math.nan) for r in self.records], dtype=np.float64)

    def columns(self) -> tuple:
        extra = [c for c in CORE_DETAIL_COLUMNS if any(c in r for r in self.records)]
        return LOG_COLUMNS + tuple(extra)

    def write_csv(self, path, provenance: str | None = None) -> None:
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            writer = csv.writer(fh)
            writer.writerow(cols)
            for r in self.records:
                writer.writerow([int(r["step"])] + [repr(float(r.get(c, math.nan))) for c in cols[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            rows = csv.reader(line for line in fh if not line.startswith("#"))
            header = next(rows)
            for values in rows:
                rec = dict(zip(header, values))
                out = {k: float(v) for k, v in rec.items()}
                out["step"] = int(out["step"])
                log.records.append(out)
        return log


def sample_tc_indices(batch_size: int, dim: int, rng):
    """Per-row latent index for the stochastic TC estimator and per-dimension counts.

    Indices are drawn uniformly with replacement, then a random set of ``dim``
    rows is overwritten with a random permutation so every dimension occurs.
    """
    if batch_size < dim:
        raise ValueError(f"index sampling needs batch size >= D ({batch_size} < {dim})")
    idx = rng.integers(0, dim, batch_size)
    slots = rng.choice(batch_size, dim, replace=False)
    idx[slots] = rng.permutation(dim)
    return idx, np.bincount(idx, minlength=dim)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``cfg.lr`` over ``cfg.warmup`` steps, then constant or cosine decay."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    if cfg.lr_decay == "cosine":
        span = max(1, cfg.steps - cfg.warmup)
        return 0.5 * cfg.lr * (1 + math.cos(math.pi * min(1.0, (step - cfg.warmup) / span)))
    return cfg.lr


def _stream(cfg, stream, step):
    return np.random.default_rng([cfg.seed, stream, step])


def _batch(dataset: Dataset, cfg: TrainConfig, step: int) -> np.ndarray:
    if cfg.batch_size >= dataset.n:
        x = dataset.samples
    else:
        idx = _stream(cfg, _BATCH_STREAM, step).choice(dataset.n, cfg.batch_size, replace=False)
        x = dataset.samples[np.sort(idx)]
    if cfg.noise_sigma > 0:
        x = inflate(x, cfg.noise_sigma, _stream(cfg, _NOISE_STREAM, step))
    return x


def loss_and_grads(model: FlowModel, batch, cfg: TrainConfig, step: int = 0):
    """Composite loss, its breakdown and gradients for every trainable parameter."""
    names = model.trainable_names()
    p = model.tensor_params(names)
    kwargs = {}
    if cfg.estimator == STOCHASTIC:
        kwargs["assignment"] = sample_tc_indices(len(batch), model.dim,
                                                 _stream(cfg, _TC_STREAM, step))[0]
    loss, breakdown = mml_loss(model, batch, cfg.weights, cfg.mode, cfg.estimator,
                               cfg.core_size, params=p, track_tc=cfg.track_tc, **kwargs)
    grads = ad.backward(loss, [p[k] for k in names])
    return breakdown, dict(zip(names, grads))


def _paths(out_dir):
    out = Path(out_dir)
    return out / CHECKPOINT_NAME, out / OPTIMIZER_NAME, out / LOG_NAME


def _save(model, state, log, out_dir, step, provenance):
    ckpt, opt, log_path = _paths(out_dir)
    model.meta["step"] = step
    save_checkpoint(model, ckpt)
    tmp = opt.with_name(opt.name + ".tmp.npz")
    np.savez(tmp, **state.to_arrays())
    tmp.replace(opt)
    log.write_csv(log_path, provenance)


def _resume(out_dir):
    ckpt, opt, log_path = _paths(out_dir)
    if not ckpt.exists():
        raise CheckpointError(f"no checkpoint to resume in {out_dir}")
    model = load_checkpoint(ckpt)
    state = AdamState.from_arrays(np.load(opt)) if opt.exists() else AdamState()
    log = TrainLog.read_csv(log_path) if log_path.exists() else TrainLog()
    return model, state, log, int(model.meta.get("step", 0))


def train(model: FlowModel, dataset: Dataset, cfg: TrainConfig, out_dir=None, resume=False,
          provenance=None, callback=None):
    """Run ``cfg.steps`` optimisation steps (in total, counting resumed ones).

    With ``out_dir`` a checkpoint, optimizer sidecar and CSV log are written
    every ``checkpoint_every`` steps and at the end.  A non-finite loss or
    gradient raises :class:`NumericalError` and leaves the last good
    checkpoint untouched.  Returns ``(model, log)``.
    """
    cfg.validate(model.dim)
    if dataset.dim != model.dim:
        raise ValueError(f"dataset dimension {dataset.dim} does not match model {model.dim}")
    state, log, start = AdamState(), TrainLog(), 0
    if resume:
        if out_dir is None:
            raise ValueError("resume needs an output directory")
        model, state, log, start = _resume(out_dir)
    else:
        model = FlowModel(model.dim, model.layers, dict(model.params), model.seed,
                          dict(model.meta))
    model.meta["train_config"] = {k: (list(v) if isinstance(v, tuple) else v)
                                  for k, v in asdict(cfg).items()}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    for step in range(start, cfg.steps):
        t0 = time.perf_counter()
        batch = _batch(dataset, cfg, step)
        breakdown, grads = loss_and_grads(model, batch, cfg, step)
        finite = np.isfinite(breakdown.mml) and all(np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            if out_dir is not None:
                log.write_csv(_paths(out_dir)[2], provenance)
            raise NumericalError(f"non-finite loss or gradient at step {step}; "
                                 "last good checkpoint kept")
        grads, norm = clip_by_norm(grads, cfg.grad_clip)
        params, state = adam_step(model.params, grads, state, learning_rate(cfg, step),
                                  cfg.betas, weight_decay=cfg.weight_decay)
        model.params = params
        ms = 1e3 * (time.perf_counter() - t0)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            means = breakdown.means()
            row = {"step": step, "l_ml": means["l_ml"], "l_tc": means.get("l_tc", math.nan),
                   "composite": breakdown.mml, "grad_norm": norm, "ms_per_step": ms}
            row.update({k: means[k] for k in CORE_DETAIL_COLUMNS if k in means})
            log.append(**row)
        if callback is not None:
            callback(step, breakdown)
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _save(model, state, log, out_dir, step + 1, provenance)

    model.meta["step"] = max(start, cfg.steps)
    if out_dir is not None:
        _save(model, state, log, out_dir, model.meta["step"], provenance)
    return model, log
