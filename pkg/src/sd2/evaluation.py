"""Metrics and protocols: treatment-effect bias, counterfactual MSE over a
do-grid, first-layer attribution, replication aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import datagen as dg
from .model import SD2Model, predict_outcome
from .training import TrainConfig, TrainHistory, train


def eps_ate(model: SD2Model, dataset: dg.GeneratedDataset) -> float:
    """Absolute bias of the average treatment effect.

    Ground truth is mean(p1 - p0): outcome probabilities for synthetic data,
    co-twin outcomes for twin records.  The estimate substitutes do-values
    into the outcome head.
    """
    if model.config.mode != "binary" or dataset.mode != "binary":
        raise ValueError("eps_ate applies to binary mode")
    if dataset.p1 is None or dataset.p0 is None:
        raise ValueError("dataset carries no ground-truth potential outcomes")
    x = dataset.covariates()
    predicted = predict_outcome(model, x, 1.0) - predict_outcome(model, x, 0.0)
    return float(abs(np.mean(dataset.p1 - dataset.p0) - predicted.mean()))


def default_grid(t: np.ndarray, points: int = 10, central: float = 0.90) -> np.ndarray:
    """Equispaced do-values over the central `central` mass of observed t."""
    tail = (1.0 - central) / 2.0
    lo, hi = np.quantile(t, [tail, 1.0 - tail])
    return np.linspace(lo, hi, points)


def counterfactual_mse(model: SD2Model, dataset: dg.GeneratedDataset,
                       t_grid: np.ndarray | None = None) -> float:
    """Mean squared error of predicted vs true counterfactual surface over a
    grid of do-values."""
    if model.config.mode != "continuous" or dataset.mode != "continuous":
        raise ValueError("counterfactual_mse applies to continuous mode")
    if not dataset.has_ground_truth:
        raise ValueError("dataset carries no counterfactual surface")
    grid = default_grid(dataset.t) if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    x = dataset.covariates()
    err = 0.0
    for tv in np.atleast_1d(grid):
        predicted = predict_outcome(model, x, float(tv))
        err += float(np.mean((predicted - dataset.surface(float(tv))) ** 2))
    return err / len(np.atleast_1d(grid))


@dataclass
class AttributionReport:
    """Per factor: mean |first-layer weight| over matching vs other columns."""
    true_mean: dict[str, float]
    other_mean: dict[str, float]

    def ratio(self, factor: str) -> float:
        other = self.other_mean[factor]
        return self.true_mean[factor] / other if other > 0 else np.inf

    def rows(self) -> list[dict]:
        return [{"factor": f, "true_slice_mean": self.true_mean[f],
                 "other_slice_mean": self.other_mean[f], "ratio": self.ratio(f)}
                for f in ("z", "c", "a")]


def attribution(model: SD2Model, roles: list[str]) -> AttributionReport:
    """Group each encoder's first-layer |weights| by whether the input column
    belongs to the encoder's target factor."""
    if len(roles) != model.config.input_dim:
        raise ValueError(f"got {len(roles)} roles for input_dim {model.config.input_dim}")
    roles_arr = np.asarray(roles)
    true_mean, other_mean = {}, {}
    for factor, enc in (("z", "enc_z"), ("c", "enc_c"), ("a", "enc_a")):
        w = np.abs(model.params[f"{enc}.l0.W"])  # (input_dim, width)
        mask = roles_arr == factor
        if not mask.any() or mask.all():
            raise ValueError(f"roles must contain some and not all {factor!r} columns")
        true_mean[factor] = float(w[mask].mean())
        other_mean[factor] = float(w[~mask].mean())
    return AttributionReport(true_mean, other_mean)


@dataclass
class EvalReport:
    metric: str
    within_values: list[float] = field(default_factory=list)
    out_values: list[float] = field(default_factory=list)
    run_ids: list[int] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"metric": self.metric, "replications": len(self.run_ids)}
        for split, vals in (("within", self.within_values), ("out", self.out_values)):
            if vals:
                mean, std, text = aggregate(vals)
                out[split] = {"mean": mean, "std": std, "formatted": text,
                              "values": list(vals)}
        if self.errors:
            out["errors"] = list(self.errors)
        return out


def aggregate(values: list[float]) -> tuple[float, float, str]:
    """Mean, population standard deviation, and the table-style 'm(s)' text."""
    if not values:
        raise ValueError("aggregate needs at least one value")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=0))
    return mean, std, f"{mean:.3f}({std:.3f})"


def metric_for(model: SD2Model, dataset: dg.GeneratedDataset) -> float:
    if model.config.mode == "binary":
        return eps_ate(model, dataset)
    return counterfactual_mse(model, dataset)


def protocol_run(config: TrainConfig,
                 triple: tuple[dg.GeneratedDataset, dg.GeneratedDataset, dg.GeneratedDataset]
                 ) -> dict:
    """Train on the first split, select on the second, report the headline
    metric within-sample (train split) and out-of-sample (test split)."""
    train_ds, val_ds, test_ds = triple
    model, history = train(config, train_ds, val_ds)
    return {
        "model": model,
        "history": history,
        "within": metric_for(model, train_ds),
        "out": metric_for(model, test_ds),
    }
