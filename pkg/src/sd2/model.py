"""The disentangling network: three encoders over shared covariates, retain
networks joining pairs of representations, deep and shallow prediction heads.

Binary mode predicts treatment/outcome probabilities through sigmoid heads;
continuous mode predicts Gaussian parameters (mean, log std).  The deep
outcome head optionally receives a treatment channel: the factual treatment
(default), the deep treatment head's output, or nothing.  At prediction time
the do-value is substituted into that channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import rng

CHECKPOINT_FORMAT = "sd2-checkpoint"
CHECKPOINT_VERSION = 1

LOG_STD_MIN = -5.0
LOG_STD_MAX = 3.0


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int
    rep_dim: int = 8
    enc_hidden: int = 64
    enc_layers: int = 2
    head_hidden: int = 32
    activation: str = "elu"
    mode: str = "binary"
    treatment_channel: str = "factual"  # factual | qt | none

    def __post_init__(self):
        for field in ("input_dim", "rep_dim", "enc_hidden", "enc_layers", "head_hidden"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.mode not in ("binary", "continuous"):
            raise ValueError(f"mode must be binary or continuous, got {self.mode!r}")
        if self.treatment_channel not in ("factual", "qt", "none"):
            raise ValueError(f"unknown treatment_channel {self.treatment_channel!r}")


class Representations(NamedTuple):
    r_z: np.ndarray
    r_c: np.ndarray
    r_a: np.ndarray


class Gaussian(NamedTuple):
    mean: ad.Tensor
    log_std: ad.Tensor


class HeadOutputsBinary(NamedTuple):
    q_t: ad.Tensor
    q_t_z: ad.Tensor
    q_t_c: ad.Tensor
    q_y: ad.Tensor
    q_y_a: ad.Tensor
    q_y_c: ad.Tensor


class HeadOutputsContinuous(NamedTuple):
    t_hat: Gaussian
    t_hat_z: Gaussian
    t_hat_c: Gaussian
    t_hat_a: Gaussian
    t_hat_cr: Gaussian    # after the rebalance network
    y_hat: Gaussian
    y_hat_a: Gaussian
    y_hat_c: Gaussian


def _layer_specs(cfg: ArchConfig) -> list[tuple[str, int, int]]:
    """(name, fan_in, fan_out) for every dense layer, in declared order."""
    out_dim = 1 if cfg.mode == "binary" else 2
    specs = []
    for enc in ("enc_z", "enc_c", "enc_a"):
        dims = [cfg.input_dim] + [cfg.enc_hidden] * cfg.enc_layers + [cfg.rep_dim]
        for i in range(len(dims) - 1):
            specs.append((f"{enc}.l{i}", dims[i], dims[i + 1]))
    specs.append(("retain_t.l0", 2 * cfg.rep_dim, cfg.enc_hidden))
    specs.append(("retain_y.l0", 2 * cfg.rep_dim, cfg.enc_hidden))
    channel_width = 0 if cfg.treatment_channel == "none" else 1
    heads = [("head_t", cfg.enc_hidden), ("head_t_z", cfg.rep_dim), ("head_t_c", cfg.rep_dim)]
    if cfg.mode == "continuous":
        heads.append(("head_t_a", cfg.rep_dim))
        heads.append(("head_t_cr", cfg.rep_dim))
    heads += [("head_y", cfg.enc_hidden + channel_width),
              ("head_y_a", cfg.rep_dim), ("head_y_c", cfg.rep_dim)]
    for name, fan_in in heads:
        specs.append((f"{name}.l0", fan_in, cfg.head_hidden))
        specs.append((f"{name}.l1", cfg.head_hidden, out_dim))
    if cfg.mode == "continuous":
        specs.append(("rebalance.l0", cfg.rep_dim, cfg.head_hidden))
        specs.append(("rebalance.l1", cfg.head_hidden, cfg.rep_dim))
    return specs


@dataclass
class SD2Model:
    config: ArchConfig
    seed: int
    params: dict[str, np.ndarray]

    def weight_names(self) -> list[str]:
        return [n for n in self.params if n.endswith(".W")]

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def init_model(config: ArchConfig, seed: int) -> SD2Model:
    """Seeded init: weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero."""
    params: dict[str, np.ndarray] = {}
    for name, fan_in, fan_out in _layer_specs(config):
        key = rng.mix_key(seed, "init/" + name)
        params[name + ".W"] = ad.glorot_init(key, fan_in, fan_out)
        params[name + ".b"] = np.zeros(fan_out)
    return SD2Model(config=config, seed=seed, params=params)


def bind(model: SD2Model, tape: ad.Tape) -> dict[str, ad.Tensor]:
    """Register every parameter on a tape, in declared order."""
    return {name: tape.parameter(value, name) for name, value in model.params.items()}


def _mlp(p: dict[str, ad.Tensor], prefix: str, x: ad.Tensor, n_layers: int,
         activation: str, out_activation: str) -> ad.Tensor:
    for i in range(n_layers):
        act = out_activation if i == n_layers - 1 else activation
        x = ad.dense(x, p[f"{prefix}.l{i}.W"], p[f"{prefix}.l{i}.b"], act)
    return x


def _encode(cfg: ArchConfig, p: dict[str, ad.Tensor], x: ad.Tensor):
    n_layers = cfg.enc_layers + 1
    r_z = _mlp(p, "enc_z", x, n_layers, cfg.activation, cfg.activation)
    r_c = _mlp(p, "enc_c", x, n_layers, cfg.activation, cfg.activation)
    r_a = _mlp(p, "enc_a", x, n_layers, cfg.activation, cfg.activation)
    return r_z, r_c, r_a


def _head_binary(cfg: ArchConfig, p, prefix: str, x: ad.Tensor) -> ad.Tensor:
    return _mlp(p, prefix, x, 2, cfg.activation, "sigmoid")


def _head_gaussian(cfg: ArchConfig, p, prefix: str, x: ad.Tensor) -> Gaussian:
    out = _mlp(p, prefix, x, 2, cfg.activation, "identity")
    mu = ad.select_cols(out, 0)
    log_std = ad.clip(ad.select_cols(out, 1), LOG_STD_MIN, LOG_STD_MAX)
    return Gaussian(mu, log_std)


def _check_input(cfg: ArchConfig, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"input width {x.shape} does not match input_dim {cfg.input_dim}")
    return x


def _as_column(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(-1, 1)


def _channel_tensor(cfg: ArchConfig, tape: ad.Tape, t: np.ndarray,
                    q_t: ad.Tensor | None) -> ad.Tensor | None:
    if cfg.treatment_channel == "none":
        return None
    if cfg.treatment_channel == "factual":
        return tape.constant(_as_column(t))
    return q_t  # "qt": the deep treatment output, gradient flows


def forward_binary(model: SD2Model, x: np.ndarray, t: np.ndarray,
                   tape: ad.Tape | None = None,
                   params: dict[str, ad.Tensor] | None = None,
                   return_reps: bool = False):
    cfg = model.config
    if cfg.mode != "binary":
        raise ValueError("forward_binary requires a binary-mode model")
    x = _check_input(cfg, x)
    t = np.asarray(t, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("binary mode requires treatments in {0, 1}")
    tape = tape or ad.Tape()
    p = params or bind(model, tape)
    xn = tape.constant(x)
    r_z, r_c, r_a = _encode(cfg, p, xn)
    h_t = ad.dense(ad.concat_cols([r_z, r_c]), p["retain_t.l0.W"], p["retain_t.l0.b"], cfg.activation)
    q_t = _head_binary(cfg, p, "head_t", h_t)
    q_t_z = _head_binary(cfg, p, "head_t_z", r_z)
    q_t_c = _head_binary(cfg, p, "head_t_c", r_c)
    h_y = ad.dense(ad.concat_cols([r_c, r_a]), p["retain_y.l0.W"], p["retain_y.l0.b"], cfg.activation)
    channel = _channel_tensor(cfg, tape, t, q_t)
    head_in = h_y if channel is None else ad.concat_cols([channel, h_y])
    q_y = _head_binary(cfg, p, "head_y", head_in)
    q_y_a = _head_binary(cfg, p, "head_y_a", r_a)
    q_y_c = _head_binary(cfg, p, "head_y_c", r_c)
    outputs = HeadOutputsBinary(q_t, q_t_z, q_t_c, q_y, q_y_a, q_y_c)
    if return_reps:
        return outputs, (r_z, r_c, r_a)
    return outputs


def forward_continuous(model: SD2Model, x: np.ndarray, t: np.ndarray,
                       tape: ad.Tape | None = None,
                       params: dict[str, ad.Tensor] | None = None) -> HeadOutputsContinuous:
    cfg = model.config
    if cfg.mode != "continuous":
        raise ValueError("forward_continuous requires a continuous-mode model")
    x = _check_input(cfg, x)
    t = np.asarray(t, dtype=np.float64)
    tape = tape or ad.Tape()
    p = params or bind(model, tape)
    xn = tape.constant(x)
    r_z, r_c, r_a = _encode(cfg, p, xn)
    h_t = ad.dense(ad.concat_cols([r_z, r_c]), p["retain_t.l0.W"], p["retain_t.l0.b"], cfg.activation)
    t_hat = _head_gaussian(cfg, p, "head_t", h_t)
    t_hat_z = _head_gaussian(cfg, p, "head_t_z", r_z)
    t_hat_c = _head_gaussian(cfg, p, "head_t_c", r_c)
    t_hat_a = _head_gaussian(cfg, p, "head_t_a", r_a)
    c_reb = _mlp(p, "rebalance", r_c, 2, cfg.activation, cfg.activation)
    t_hat_cr = _head_gaussian(cfg, p, "head_t_cr", c_reb)
    h_y = ad.dense(ad.concat_cols([r_c, r_a]), p["retain_y.l0.W"], p["retain_y.l0.b"], cfg.activation)
    if cfg.treatment_channel == "none":
        head_in = h_y
    elif cfg.treatment_channel == "factual":
        head_in = ad.concat_cols([tape.constant(_as_column(t)), h_y])
    else:
        head_in = ad.concat_cols([t_hat.mean, h_y])
    y_hat = _head_gaussian(cfg, p, "head_y", head_in)
    y_hat_a = _head_gaussian(cfg, p, "head_y_a", r_a)
    y_hat_c = _head_gaussian(cfg, p, "head_y_c", r_c)
    return HeadOutputsContinuous(t_hat, t_hat_z, t_hat_c, t_hat_a, t_hat_cr,
                                 y_hat, y_hat_a, y_hat_c)


def encode(model: SD2Model, x: np.ndarray) -> Representations:
    """Representations as plain arrays (convenience wrapper)."""
    x = _check_input(model.config, x)
    tape = ad.Tape()
    p = bind(model, tape)
    r_z, r_c, r_a = _encode(model.config, p, tape.constant(x))
    return Representations(r_z.value, r_c.value, r_a.value)


def predict_outcome(model: SD2Model, x: np.ndarray, t_value: float) -> np.ndarray:
    """Potential-outcome estimate with the do-value substituted into the
    treatment channel; representations come from x only."""
    cfg = model.config
    x = _check_input(cfg, x)
    if cfg.mode == "binary" and t_value not in (0.0, 1.0):
        raise ValueError("binary mode requires a do-value in {0, 1}")
    tape = ad.Tape()
    p = bind(model, tape)
    xn = tape.constant(x)
    r_z, r_c, r_a = _encode(cfg, p, xn)
    h_y = ad.dense(ad.concat_cols([r_c, r_a]), p["retain_y.l0.W"], p["retain_y.l0.b"], cfg.activation)
    if cfg.treatment_channel == "none":
        head_in = h_y
    else:
        channel = tape.constant(np.full((x.shape[0], 1), float(t_value)))
        head_in = ad.concat_cols([channel, h_y])
    if cfg.mode == "binary":
        return _head_binary(cfg, p, "head_y", head_in).value[:, 0]
    return _head_gaussian(cfg, p, "head_y", head_in).mean.value[:, 0]


def checkpoint_save(model: SD2Model, path: str | Path) -> None:
    """Manifest line (JSON) + little-endian float64 arrays in declared order."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "params": [{"name": n, "shape": list(v.shape)} for n, v in model.params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8") + b"\n")
        for value in model.params.values():
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


class CheckpointError(Exception):
    pass


def checkpoint_load(path: str | Path) -> SD2Model:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not a model checkpoint file")
        if manifest.get("version", 0) > CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {manifest['version']} is newer than supported "
                f"({CHECKPOINT_VERSION})")
        config = ArchConfig(**manifest["config"])
        expected = {name + suffix: shape
                    for name, fan_in, fan_out in _layer_specs(config)
                    for suffix, shape in ((".W", [fan_in, fan_out]), (".b", [fan_out]))}
        params: dict[str, np.ndarray] = {}
        for entry in manifest["params"]:
            name, shape = entry["name"], entry["shape"]
            if name not in expected or expected[name] != shape:
                raise CheckpointError(f"parameter {name!r} has shape {shape}, "
                                      f"expected {expected.get(name)}")
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"truncated checkpoint at parameter {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if set(params) != set(expected):
            raise CheckpointError("checkpoint parameter list incomplete")
    return SD2Model(config=config, seed=manifest["seed"], params=params)
