"""Deterministic minibatch training: Adam over the composite objective,
validation-based checkpoint selection, ablation variants, replication.

Everything is keyed off the run seed through counter-based streams: epoch
shuffles, importance weights, and dataset draws are pure functions of
(config, data), so two runs with the same inputs produce identical
checkpoints.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from . import autodiff as ad
from . import datagen as dg
from . import rng
from .losses import (DegenerateBatchError, LossBreakdown, LossFlags, LossWeights,
                     importance_weights, total_loss_binary, total_loss_continuous)
from .model import ArchConfig, SD2Model, bind, forward_binary, forward_continuous, init_model

log = logging.getLogger(__name__)

VARIANTS = ("Lp", "Lp+Lt", "Lp+Lt+La", "Total")


class TrainingError(Exception):
    """Non-finite loss; carries epoch, batch, and the offending term."""

    def __init__(self, message: str, epoch: int | None = None,
                 batch: int | None = None, term: str | None = None):
        super().__init__(message)
        self.epoch, self.batch, self.term = epoch, batch, term


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "binary"
    arch: ArchConfig = field(default_factory=lambda: ArchConfig(input_dim=1))
    weights: LossWeights = field(default_factory=LossWeights)
    flags: LossFlags = field(default_factory=LossFlags)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 40
    seed: int = 0
    variant: str = "Total"
    use_importance_weights: bool = True
    dataset: dict | None = None
    split_ratios: tuple[float, float, float] = (0.63, 0.27, 0.10)
    independent_draws: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.patience > self.max_epochs and self.max_epochs > 0:
            raise ValueError("patience must not exceed max_epochs")
        if self.mode not in ("binary", "continuous"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)          # per epoch x split
    criterion: list[float] = field(default_factory=list)    # validation criterion per epoch
    epoch_seconds: list[float] = field(default_factory=list)
    selected_epoch: int = -1

    def append(self, epoch: int, split: str, bd: LossBreakdown):
        row = {"epoch": epoch, "split": split}
        row.update({f: getattr(bd, f) for f in LossBreakdown.FIELDS})
        self.rows.append(row)


def apply_ablation(config: TrainConfig, variant: str) -> TrainConfig:
    """Table-style variants: Lp keeps only the factual outcome path, Lp+Lt
    restores the deep treatment objective, Lp+Lt+La restores the adjustment
    discrepancy, Total is the full objective."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    w = config.weights
    if variant == "Total":
        return replace(config, variant=variant)
    if variant == "Lp":
        new_w = replace(w, alpha=0.0, beta=0.0, gamma=0.0)
        arch = replace(config.arch, treatment_channel="none")
        return replace(config, weights=new_w, arch=arch, variant=variant,
                       use_importance_weights=False)
    if variant == "Lp+Lt":
        new_w = replace(w, beta=0.0, gamma=0.0)
    else:  # Lp+Lt+La
        new_w = replace(w, gamma=0.0)
    return replace(config, weights=new_w, variant=variant,
                   use_importance_weights=False)


def _arch_for(config: TrainConfig, input_dim: int) -> ArchConfig:
    return replace(config.arch, input_dim=input_dim, mode=config.mode)


def _sample_weights(config: TrainConfig, outputs, t: np.ndarray) -> np.ndarray:
    if config.mode == "binary" and config.use_importance_weights:
        return importance_weights(outputs.q_t_c.value, t)
    return np.ones(len(t))


def _batch_breakdown(config: TrainConfig, model: SD2Model, x, t, y,
                     tape: ad.Tape) -> LossBreakdown:
    params = bind(model, tape)
    if config.mode == "binary":
        outputs = forward_binary(model, x, t, tape, params, return_reps=True)
        outputs, reps = outputs
        w = _sample_weights(config, outputs, t)
        return total_loss_binary(outputs, t, y, w, config.weights, params,
                                 reps[2], config.flags)
    outputs = forward_continuous(model, x, t, tape, params)
    return total_loss_continuous(outputs, t, y, config.weights, params, config.flags)


def _check_finite(bd: LossBreakdown, epoch: int, batch: int):
    for name in LossBreakdown.FIELDS:
        v = getattr(bd, name)
        if not np.isfinite(v):
            raise TrainingError(
                f"non-finite loss term {name!r} at epoch {epoch}, batch {batch}",
                epoch=epoch, batch=batch, term=name)


def _eval_breakdown(config: TrainConfig, model: SD2Model, ds: dg.GeneratedDataset,
                    chunk: int = 4096) -> tuple[LossBreakdown, float]:
    """Full-split loss breakdown (chunked) and the selection criterion.

    The criterion is fit-only: the importance-weighted outcome loss normalized
    by the mean weight (so its scale is comparable across epochs as the
    weights evolve), plus alpha times the factual treatment loss.
    """
    from .losses import bernoulli_ce_vec

    x_all = ds.covariates()
    n = ds.n
    sums = {f: 0.0 for f in LossBreakdown.FIELDS}
    covered = 0
    crit_num = 0.0
    crit_wsum = 0.0
    crit_t = 0.0
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        m = sl.stop - sl.start
        tape = ad.Tape()
        if config.mode == "binary":
            params = bind(model, tape)
            outputs, reps = forward_binary(model, x_all[sl], ds.t[sl], tape, params,
                                           return_reps=True)
            try:
                w = _sample_weights(config, outputs, ds.t[sl])
                bd = total_loss_binary(outputs, ds.t[sl], ds.y[sl], w, config.weights,
                                       params, reps[2], config.flags)
            except DegenerateBatchError:
                continue
            ce_y = bernoulli_ce_vec(outputs.q_y, ds.y[sl]).value[:, 0]
            ce_t = bernoulli_ce_vec(outputs.q_t, ds.t[sl]).value[:, 0]
            crit_num += float((w * ce_y).sum())
            crit_wsum += float(w.sum())
            crit_t += float(ce_t.sum())
        else:
            bd = _batch_breakdown(config, model, x_all[sl], ds.t[sl], ds.y[sl], tape)
            crit_num += bd.factual_y * m
            crit_wsum += m
            crit_t += bd.factual_t * m
        for f in LossBreakdown.FIELDS:
            sums[f] += getattr(bd, f) * m
        covered += m
    covered = max(covered, 1)
    mean_bd = LossBreakdown(**{f: sums[f] / covered for f in LossBreakdown.FIELDS})
    criterion = crit_num / max(crit_wsum, 1e-12) + config.weights.alpha * crit_t / covered
    return mean_bd, criterion


def train(config: TrainConfig, train_ds: dg.GeneratedDataset,
          val_ds: dg.GeneratedDataset) -> tuple[SD2Model, TrainHistory]:
    """Adam minimization with per-epoch shuffling, early stopping, and
    best-validation-epoch checkpointing."""
    if train_ds.mode != config.mode:
        raise ValueError(f"dataset mode {train_ds.mode!r} != config mode {config.mode!r}")
    x_all = train_ds.covariates()
    n = train_ds.n
    arch = _arch_for(config, x_all.shape[1])
    model = init_model(arch, rng.mix_key(config.seed, "init"))
    state = ad.AdamState(model.params, lr=config.optimizer.lr,
                         beta1=config.optimizer.beta1, beta2=config.optimizer.beta2,
                         eps=config.optimizer.eps)
    history = TrainHistory()
    best = (np.inf, model.copy_params(), -1)
    bad = 0
    shuffle_key = rng.mix_key(config.seed, "shuffle")
    for epoch in range(config.max_epochs):
        started = time.perf_counter()
        perm = rng.permutation(rng.mix_key_int(shuffle_key, epoch), n)
        reshuffled = False
        batch_sums = {f: 0.0 for f in LossBreakdown.FIELDS}
        seen = 0
        pos = 0
        batch_index = 0
        while pos < n:
            idx = perm[pos:pos + config.batch_size]
            tb = train_ds.t[idx]
            if config.mode == "binary" and (tb.sum() == 0 or tb.sum() == len(tb)):
                if not reshuffled:
                    # one fresh shuffle of the remaining rows, then skip repeats
                    reshuffled = True
                    rest = perm[pos:]
                    sub = rng.permutation(rng.mix_key_int(shuffle_key, -epoch - 1), len(rest))
                    perm = np.concatenate([perm[:pos], rest[sub]])
                    continue
                log.warning("skipping single-class batch %d in epoch %d", batch_index, epoch)
                pos += config.batch_size
                batch_index += 1
                continue
            tape = ad.Tape()
            bd = _batch_breakdown(config, model, x_all[idx], tb, train_ds.y[idx], tape)
            _check_finite(bd, epoch, batch_index)
            _, grads = tape.gradients(bd.node)
            ad.adam_step(model.params, grads, state)
            for f in LossBreakdown.FIELDS:
                batch_sums[f] += getattr(bd, f) * len(idx)
            seen += len(idx)
            pos += config.batch_size
            batch_index += 1
        if seen:
            history.append(epoch, "train",
                           LossBreakdown(**{f: batch_sums[f] / seen
                                            for f in LossBreakdown.FIELDS}))
        val_bd, criterion = _eval_breakdown(config, model, val_ds)
        history.append(epoch, "val", val_bd)
        history.criterion.append(criterion)
        history.epoch_seconds.append(time.perf_counter() - started)
        if criterion < best[0]:
            best = (criterion, model.copy_params(), epoch)
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.params = best[1]
    history.selected_epoch = best[2]
    return model, history


def resolve_data(config: TrainConfig, seed: int
                 ) -> tuple[dg.GeneratedDataset, dg.GeneratedDataset, dg.GeneratedDataset]:
    """Build (train, val, test) from the config's dataset reference.

    Synthetic references draw fresh data per seed (three independent draws by
    default); directory and twins references are re-split per seed.
    """
    ref = config.dataset
    if not ref:
        raise ValueError("config carries no dataset reference")
    kind = ref.get("kind")
    fields = {k: v for k, v in ref.items() if k != "kind"}
    if kind == "synthetic_binary":
        spec = dg.SyntheticSpec(**{**fields, "seed": rng.mix_key(seed, "data")})
        if config.independent_draws:
            return dg.independent_triple(spec)
        return dg.split(dg.gen_binary(spec), config.split_ratios, rng.mix_key(seed, "split"))
    if kind == "demand":
        spec = dg.DemandSpec(**{**fields, "seed": rng.mix_key(seed, "data")})
        if config.independent_draws:
            return dg.independent_triple(spec)
        return dg.split(dg.gen_continuous(spec), config.split_ratios,
                        rng.mix_key(seed, "split"))
    if kind == "twins":
        fields.pop("hidden_columns", None)
        fields.pop("x_columns", None)
        if "m_columns" in fields:
            fields["m_columns"] = tuple(fields["m_columns"])
        if "ratios" in fields:
            fields["ratios"] = tuple(fields["ratios"])
        spec = dg.TwinsSpec(**{**fields, "seed": rng.mix_key(seed, "policy")})
        ds = dg.twins_transform(spec)
        return dg.split(ds, spec.ratios, rng.mix_key(seed, "split"))
    if kind == "dir":
        ds = dg.read_dataset(fields["path"])
        return dg.split(ds, config.split_ratios, rng.mix_key(seed, "split"))
    raise ValueError(f"unknown dataset kind {kind!r}")


def replicate(config: TrainConfig, k: int, base_seed: int, metric_fn=None
              ) -> list[dict]:
    """k independent runs with derived seeds and fresh data per run.

    Failures are collected per run, not propagated.  metric_fn(model, triple)
    may attach evaluation results.
    """
    if k < 1:
        raise ValueError("replication count must be >= 1")
    results = []
    for i in range(k):
        seed_i = rng.mix_key_int(base_seed, i)
        run_cfg = replace(config, seed=seed_i)
        entry: dict = {"replication": i, "seed": seed_i}
        try:
            triple = resolve_data(run_cfg, seed_i)
            model, history = train(run_cfg, triple[0], triple[1])
            entry.update(model=model, history=history, datasets=triple)
            if metric_fn is not None:
                entry["metrics"] = metric_fn(model, triple)
        except Exception as exc:  # noqa: BLE001 - collected, reported downstream
            entry["error"] = exc
            log.warning("replication %d failed: %s", i, exc)
        results.append(entry)
    return results


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["arch"].pop("input_dim", None)  # derived from data at train time
    return d
