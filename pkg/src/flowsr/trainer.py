"""Two-stage GAN training and the adversarial-weight stability sweep.

Stage 1 trains the generator on the data-matching loss only. Stage 2 alternates
one discriminator step and one generator step per batch with the configured
adversarial variant. Every source of randomness has its own seeded stream, so
a stage-2 run with ``lambda_g = 0`` retraces continued stage-1 training exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import NumericalError, ValidationError
from .io import save_checkpoint
from .losses import (
    LossConfig,
    LossReport,
    Variant,
    adversarial_losses,
    data_losses,
    discriminator_total,
    generator_total,
    gradient_penalty,
    mask_nonfluid,
)
from .nets import (
    DiscriminatorSpec,
    GeneratorSpec,
    adam_init,
    adam_step,
    backward,
    forward_discriminator,
    forward_generator,
    init_discriminator,
    init_generator,
    param_l2,
)
from .volume import Region

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "PatchDataset",
    "EpochRecord",
    "TrainRun",
    "train_stage1",
    "train_stage2",
    "run_stability_suite",
    "write_training_log",
    "patch_mre",
]

# stream ids for np.random.default_rng([seed, stream])
_DATA, _GEN_INIT, _DISC_INIT, _BETA = 10, 11, 12, 13


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 20
    epochs_stage2: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    variant: Variant = Variant.WASSERSTEIN
    lambda_g: float = 1e-3
    mu_g: float = 5e-7
    mu_d: float = 5e-5
    lambda_gp: float = 10.0
    seed: int = 0
    disc_only: bool = False
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    @property
    def effective_lambda_g(self):
        return 0.0 if self.disc_only else self.lambda_g

    def loss_config(self):
        return LossConfig(self.effective_lambda_g, self.mu_g, self.mu_d, self.lambda_gp, self.variant)


class PatchDataset:
    """Stacked patch arrays: ``x_lr (N,12,12,12,3)``, ``x_hr (N,24,24,24,3)``, ``labels (N,24,24,24)``."""

    def __init__(self, x_lr, x_hr, labels):
        self.x_lr = np.asarray(x_lr, dtype=np.float32)
        self.x_hr = np.asarray(x_hr, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.uint8)
        if not len(self.x_lr) == len(self.x_hr) == len(self.labels):
            raise ValidationError("dataset arrays differ in length")

    @classmethod
    def from_pairs(cls, pairs):
        if not pairs:
            return cls(np.zeros((0, 12, 12, 12, 3)), np.zeros((0, 24, 24, 24, 3)), np.zeros((0, 24, 24, 24)))
        return cls(
            np.stack([p.x_lr for p in pairs]),
            np.stack([p.x_hr for p in pairs]),
            np.stack([p.labels_hr for p in pairs]),
        )

    def __len__(self):
        return len(self.x_lr)

    def batch(self, idx, dtype):
        return (
            torch.as_tensor(self.x_lr[idx], dtype=dtype),
            torch.as_tensor(self.x_hr[idx], dtype=dtype),
            torch.as_tensor(self.labels[idx]),
        )


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    split: str
    losses: LossReport
    mre: float


@dataclass
class TrainRun:
    config: TrainConfig
    records: list = field(default_factory=list)
    theta_g: dict = None
    theta_d: dict = None
    g_state: object = None
    d_state: object = None
    data_rng: object = None
    beta_rng: object = None
    epochs_done: int = 0

    def rows(self, split=None):
        return [r for r in self.records if split is None or r.split == split]

    def final(self, split="val"):
        rows = self.rows(split)
        return rows[-1] if rows else None


def patch_mre(x_sr, x_hr, labels):
    """Mean relative error (%) over fluid voxels, tanh-clamped."""
    fluid = labels != int(Region.NONFLUID)
    if not bool(fluid.any()):
        return math.nan
    err = torch.linalg.vector_norm(x_sr - x_hr, dim=-1)[fluid]
    ref = torch.linalg.vector_norm(x_hr, dim=-1)[fluid]
    return 100.0 * float(torch.tanh(err.double() / (ref.double() + 1e-6)).mean())


def _check_finite(value, what):
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {what} encountered during training")


def _accumulate(acc, parts, weight):
    for k, v in parts.items():
        if k.startswith("total"):
            continue
        acc[k] = acc.get(k, 0.0) + weight * float(v.detach() if isinstance(v, torch.Tensor) else v)


def _report(acc, n, lcfg):
    rep = LossReport(**{k: v / n for k, v in acc.items()})
    return rep.recompute_totals(lcfg)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _disc_input(x_sr, labels):
    return mask_nonfluid(x_sr, labels)


def _evaluate(run, dataset, cfg, lcfg, adversarial):
    """Validation pass in fixed order; returns ``(LossReport, MRE)``."""
    acc, n_tot, mre_acc, mre_n = {}, 0, 0.0, 0
    for start in range(0, len(dataset), cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, len(dataset)))
        x_lr, x_hr, labels = dataset.batch(idx, cfg.dtype)
        with torch.no_grad():
            x_sr = forward_generator(run.theta_g, x_lr)
            parts = dict(zip(("mse_nonfluid", "mse_bound", "mse_core"), data_losses(x_sr, x_hr, labels)))
            if adversarial:
                s_hr = forward_discriminator(run.theta_d, x_hr)
                s_sr = forward_discriminator(run.theta_d, _disc_input(x_sr, labels))
        if adversarial:
            gp = 0.0
            if cfg.variant is Variant.WASSERSTEIN:
                beta = np.random.default_rng([cfg.seed, _BETA, 999, start]).random(len(idx))
                gp = gradient_penalty(run.theta_d, x_hr, _disc_input(x_sr, labels), beta, cfg.lambda_gp).detach()
            adv_g, adv_d = adversarial_losses(cfg.variant, s_hr, s_sr, gp)
            parts["adv_g"], parts["adv_d"] = adv_g, adv_d
        fluid = labels != int(Region.NONFLUID)
        if bool(fluid.any()):
            mre_acc += patch_mre(x_sr, x_hr, labels) * int(fluid.sum())
            mre_n += int(fluid.sum())
        _accumulate(acc, parts, len(idx))
        n_tot += len(idx)
    with torch.no_grad():
        acc["l2_g"] = float(param_l2(run.theta_g)) * n_tot
        if adversarial:
            acc["l2_d"] = float(param_l2(run.theta_d)) * n_tot
    return _report(acc, n_tot, lcfg), (mre_acc / mre_n if mre_n else math.nan)


def _new_run(cfg):
    return TrainRun(
        config=cfg,
        theta_g=init_generator(cfg.generator, np.random.default_rng([cfg.seed, _GEN_INIT]), cfg.dtype),
        data_rng=np.random.default_rng([cfg.seed, _DATA]),
        beta_rng=np.random.default_rng([cfg.seed, _BETA]),
    )


def train_stage1(cfg, dataset, val=None, checkpoint_dir=None, run=None):
    """Generator-only training on region MSE + L2. Returns ``(theta_g, TrainRun)``.

    Passing a previous ``run`` continues it (same optimiser state and data stream).
    """
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    run = run or _new_run(cfg)
    if run.g_state is None:
        run.g_state = adam_init(run.theta_g)
    lcfg = replace(cfg.loss_config(), lambda_g=0.0)
    for _ in range(cfg.epochs_stage1):
        run.epochs_done += 1
        acc, mre_acc, mre_n = {}, 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, run.data_rng):
            x_lr, x_hr, labels = dataset.batch(idx, cfg.dtype)
            x_sr = forward_generator(run.theta_g, x_lr)
            total, parts = generator_total(x_sr, x_hr, labels, 0.0, run.theta_g, lcfg)
            _check_finite(float(total.detach()), "generator loss")
            grads = backward(total, run.theta_g)
            run.theta_g, run.g_state = adam_step(run.theta_g, grads, run.g_state, cfg.lr)
            _accumulate(acc, parts, len(idx))
            mre_acc, mre_n = _add_mre(mre_acc, mre_n, x_sr.detach(), x_hr, labels)
        run.records.append(EpochRecord(run.epochs_done, 1, "train", _report(acc, len(dataset), lcfg), mre_acc / mre_n if mre_n else math.nan))
        if val is not None and len(val):
            rep, mre = _evaluate(run, val, cfg, lcfg, adversarial=False)
            run.records.append(EpochRecord(run.epochs_done, 1, "val", rep, mre))
        log.info("stage 1 epoch %d done", run.epochs_done)
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "stage1_generator.f4dw", run.theta_g)
    return run.theta_g, run


def _add_mre(acc, n, x_sr, x_hr, labels):
    fluid = labels != int(Region.NONFLUID)
    k = int(fluid.sum())
    if k:
        acc += patch_mre(x_sr, x_hr, labels) * k
        n += k
    return acc, n


def train_stage2(cfg, dataset, theta_g_init, val=None, checkpoint_dir=None, resume=None):
    """Joint adversarial fine-tuning: per batch one D step, then one G step.

    ``resume`` (a stage-1 :class:`TrainRun`) carries over the generator's Adam
    state and the data-shuffling stream; the discriminator and its optimiser
    are always created fresh. Returns ``(theta_g, theta_d, TrainRun)``.
    """
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    if resume is not None:
        run = TrainRun(
            config=cfg,
            records=list(resume.records),
            theta_g=theta_g_init,
            g_state=resume.g_state,
            data_rng=resume.data_rng,
            beta_rng=resume.beta_rng,
            epochs_done=resume.epochs_done,
        )
    else:
        run = _new_run(cfg)
        run.theta_g = theta_g_init
    if set(run.theta_g) != set(init_generator(cfg.generator, np.random.default_rng(0), cfg.dtype)):
        raise ValidationError("initial generator does not match the configured generator structure")
    if run.g_state is None:
        run.g_state = adam_init(run.theta_g)
    run.theta_d = init_discriminator(cfg.discriminator, np.random.default_rng([cfg.seed, _DISC_INIT]), cfg.dtype)
    run.d_state = adam_init(run.theta_d)
    lcfg = cfg.loss_config()
    feed_back = lcfg.lambda_g > 0

    for _ in range(cfg.epochs_stage2):
        run.epochs_done += 1
        acc, mre_acc, mre_n = {}, 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, run.data_rng):
            x_lr, x_hr, labels = dataset.batch(idx, cfg.dtype)
            beta = run.beta_rng.random(len(idx))
            x_sr = forward_generator(run.theta_g, x_lr)

            # discriminator step on masked, detached SR
            sr_in = _disc_input(x_sr.detach(), labels)
            s_hr = forward_discriminator(run.theta_d, x_hr)
            s_sr = forward_discriminator(run.theta_d, sr_in)
            gp = 0.0
            if cfg.variant is Variant.WASSERSTEIN:
                gp = gradient_penalty(run.theta_d, x_hr, sr_in, beta, cfg.lambda_gp)
            _, adv_d = adversarial_losses(cfg.variant, s_hr, s_sr, gp)
            d_total, d_parts = discriminator_total(adv_d, run.theta_d, lcfg)
            _check_finite(float(d_total.detach()), "discriminator loss")
            d_grads = backward(d_total, run.theta_d)
            run.theta_d, run.d_state = adam_step(run.theta_d, d_grads, run.d_state, cfg.lr)

            # generator step against the updated discriminator
            if feed_back:
                s_hr_g = forward_discriminator(run.theta_d, x_hr).detach()
                s_sr_g = forward_discriminator(run.theta_d, _disc_input(x_sr, labels))
                adv_g, _ = adversarial_losses(cfg.variant, s_hr_g, s_sr_g)
            else:
                with torch.no_grad():
                    s_sr_g = forward_discriminator(run.theta_d, _disc_input(x_sr, labels))
                    adv_g, _ = adversarial_losses(cfg.variant, s_hr.detach(), s_sr_g)
            g_total, g_parts = generator_total(x_sr, x_hr, labels, adv_g if feed_back else 0.0, run.theta_g, lcfg)
            _check_finite(float(g_total.detach()), "generator loss")
            g_grads = backward(g_total, run.theta_g)
            run.theta_g, run.g_state = adam_step(run.theta_g, g_grads, run.g_state, cfg.lr)

            g_parts["adv_g"] = adv_g.detach()
            _accumulate(acc, {**g_parts, **d_parts}, len(idx))
            mre_acc, mre_n = _add_mre(mre_acc, mre_n, x_sr.detach(), x_hr, labels)
        run.records.append(EpochRecord(run.epochs_done, 2, "train", _report(acc, len(dataset), lcfg), mre_acc / mre_n if mre_n else math.nan))
        if val is not None and len(val):
            rep, mre = _evaluate(run, val, cfg, lcfg, adversarial=True)
            run.records.append(EpochRecord(run.epochs_done, 2, "val", rep, mre))
        log.info("stage 2 epoch %d done", run.epochs_done)
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "stage2_generator.f4dw", run.theta_g)
        save_checkpoint(Path(checkpoint_dir) / "stage2_discriminator.f4dw", run.theta_d)
    return run.theta_g, run.theta_d, run


LOG_FIELDS = ["epoch", "stage", "variant", "lambda_g", "split", "mse_nonfluid", "mse_bound", "mse_core",
              "adv_g", "adv_d", "l2_g", "l2_d", "total_g", "total_d", "mre"]


def write_training_log(path, run):
    cfg = run.config
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in run.records:
            d = r.losses.as_dict()
            variant = "none" if r.stage == 1 else cfg.variant.value
            lam = 0.0 if r.stage == 1 else cfg.effective_lambda_g
            w.writerow([r.epoch, r.stage, variant, repr(lam), r.split]
                       + [repr(float(d[k])) for k in LOG_FIELDS[5:14]] + [repr(float(r.mre))])


def read_training_log(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _clone_run(run):
    """Deep-enough copy of a stage-1 run so several stage-2 cells can resume from it."""
    import copy

    return TrainRun(
        config=run.config,
        records=list(run.records),
        theta_g={k: v.detach().clone().requires_grad_(True) for k, v in run.theta_g.items()},
        g_state=copy.deepcopy(run.g_state),
        data_rng=copy.deepcopy(run.data_rng),
        beta_rng=copy.deepcopy(run.beta_rng),
        epochs_done=run.epochs_done,
    )


SUMMARY_FIELDS = ["variant", "lambda_g", "final_val_mre", "best_val_mre", "final_val_data_loss",
                  "baseline_val_data_loss", "data_loss_ratio"]


def run_stability_suite(cfg, dataset, val, variants=tuple(Variant), lambdas=(1e-4, 1e-3, 1e-2),
                        out_dir=None):
    """Train one stage-2 run per (variant, lambda_g) cell from a shared stage-1 warm start.

    A ``lambda_g = 0`` baseline is always added. Returns ``(summary_rows, runs)``
    where ``runs`` maps ``(variant, lambda_g)`` to :class:`TrainRun`.
    """
    _, base = train_stage1(cfg, dataset, val)
    cells = [(Variant.WASSERSTEIN, 0.0)] + [(Variant(v), float(l)) for v in variants for l in lambdas]
    runs = {}
    for variant, lam in cells:
        ccfg = replace(cfg, variant=variant, lambda_g=lam, disc_only=lam == 0.0)
        resume = _clone_run(base)
        _, _, run = train_stage2(ccfg, dataset, resume.theta_g, val, resume=resume)
        runs[(variant.value, lam)] = run
        log.info("stability cell %s lambda_g=%g done", variant.value, lam)

    baseline = runs[(Variant.WASSERSTEIN.value, 0.0)].final("val")
    base_loss = baseline.losses.data_loss if baseline else math.nan
    rows = []
    for (variant, lam), run in runs.items():
        vals = [r for r in run.rows("val") if r.stage == 2]
        final = vals[-1] if vals else None
        rows.append({
            "variant": "baseline" if lam == 0.0 else variant,
            "lambda_g": lam,
            "final_val_mre": final.mre if final else math.nan,
            "best_val_mre": min(r.mre for r in vals) if vals else math.nan,
            "final_val_data_loss": final.losses.data_loss if final else math.nan,
            "baseline_val_data_loss": base_loss,
            "data_loss_ratio": (final.losses.data_loss / base_loss) if final and base_loss else math.nan,
        })
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "stability_summary.csv", "w", newline="") as f:
            w = csv.DictWriter(f, SUMMARY_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        for (variant, lam), run in runs.items():
            write_training_log(out_dir / f"log_{variant}_{lam:g}.csv", run)
    return rows, runs
