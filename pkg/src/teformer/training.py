"""Surrogate-gradient training, evaluation, metrics and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Dataset
from .errors import ConfigError, ContractError, FormatError, NumericError
from .model import Model, ModelConfig
from .neurons import RELAXED, record_firing_rates

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "TEFORMER-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cosine"
    seed: int = 0
    label_smoothing: float = 0.1
    grad_clip: float = 1.0
    eval_batch_size: int = 256

    def __post_init__(self):
        def bad(name, why):
            raise ConfigError(f"TrainConfig.{name}: {why}", field=name)

        if self.epochs < 1:
            bad("epochs", "must be >= 1")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        for name in ("lr", "weight_decay", "grad_clip", "label_smoothing"):
            if getattr(self, name) < 0:
                bad(name, "must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            bad("optimizer", "must be 'adam' or 'sgd'")
        if self.schedule not in ("cosine", "constant"):
            bad("schedule", "must be 'cosine' or 'constant'")
        if self.seed is None:
            bad("seed", "is mandatory")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys {sorted(unknown)}", field=sorted(unknown)[0])
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# -- optimisation -------------------------------------------------------------


class Optimizer:
    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.betas
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if cfg.weight_decay and p.data.ndim >= 2:
                p.data -= (lr * cfg.weight_decay) * p.data
            if cfg.optimizer == "sgd":
                m *= cfg.momentum
                m += g
                p.data -= lr * m
            else:
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                p.data -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.data.dtype)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= factor
    return norm


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant" or total <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total))


def first_nonfinite(params, attr="data"):
    for p in params:
        arr = getattr(p, attr)
        if arr is not None and not np.all(np.isfinite(arr)):
            return p.name
    return None


# -- evaluation ----------------------------------------------------------------


def evaluate(model: Model, data: Dataset, batch_size=256, encode_seed=None) -> dict:
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    model.eval()
    correct = 0
    loss_sum = 0.0
    with nx.no_grad(), record_firing_rates() as rates:
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            logits = model(data.batch(idx), sample_ids=idx, encode_seed=encode_seed)
            y = data.labels[idx]
            loss_sum += float(nx.cross_entropy(logits, y).data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    model.train()
    return {
        "top1": correct / len(data),
        "loss": loss_sum / len(data),
        "firing_rates": {k: float(np.mean(v)) for k, v in rates.items()},
    }


def predict_logits(model: Model, data: Dataset, batch_size=256) -> np.ndarray:
    model.eval()
    out = []
    with nx.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            out.append(model(data.batch(idx), sample_ids=idx).data)
    model.train()
    return np.concatenate(out)


# -- training -------------------------------------------------------------------


def metrics_header(n_alpha: int):
    return ["epoch", "split", "loss", "top1", "wall_s"] + [f"tea_alpha_{i}" for i in range(n_alpha)]


def train(model: Model, train_data: Dataset, eval_data: Dataset | None, cfg: TrainConfig,
          metrics_path=None, checkpoint_dir=None, resample_encoding=True) -> list[dict]:
    """Train in place and return the per-epoch history.

    With ``resample_encoding``, stochastic encoders draw a fresh spike train
    per epoch (seeded); evaluation always uses the model's base encoder seed.
    """
    if len(train_data) == 0:
        raise ContractError("empty training set")
    params = model.parameters()
    opt = Optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    writer = None
    fh = None
    n_alpha = len(model.tea_modules())
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(metrics_header(n_alpha))
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            model.train()
            perm = rng.permutation(n)
            loss_sum = 0.0
            correct = 0
            alpha_trace = []
            enc_seed = model.config.encoding_seed + 1000003 * (epoch + 1) if resample_encoding else None
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                logits = model(train_data.batch(idx), sample_ids=idx, encode_seed=enc_seed)
                y = train_data.labels[idx]
                loss = nx.cross_entropy(logits, y, cfg.label_smoothing)
                lv = float(loss.data)
                if not math.isfinite(lv):
                    bad = first_nonfinite(params) or "<activations>"
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}; first bad parameter: {bad}")
                opt.zero_grad()
                nx.backward(loss)
                bad = first_nonfinite(params, "grad")
                if bad is not None:
                    # a corrupted weight is the likelier origin than the gradient it poisoned
                    bad = first_nonfinite(params) or bad
                    raise NumericError(f"non-finite gradient at epoch {epoch} step {step}; first bad parameter: {bad}")
                clip_grad_norm(params, cfg.grad_clip)
                opt.step(lr_at(cfg, step, total))
                step += 1
                loss_sum += lv * len(idx)
                correct += int((logits.data.argmax(axis=1) == y).sum())
                alpha_trace.append(model.tea_alphas())
            wall = time.perf_counter() - t0
            rec = {
                "epoch": epoch,
                "train_loss": loss_sum / n,
                "train_top1": correct / n,
                "wall_s": wall,
                "tea_alpha": model.tea_alphas(),
                "tea_alpha_trace": alpha_trace,
            }
            if eval_data is not None and len(eval_data):
                ev = evaluate(model, eval_data, cfg.eval_batch_size)
                rec.update(eval_loss=ev["loss"], eval_top1=ev["top1"], firing_rates=ev["firing_rates"])
            history.append(rec)
            log.info("epoch %d loss %.4f train %.3f eval %s alpha %s", epoch, rec["train_loss"], rec["train_top1"],
                     rec.get("eval_top1"), rec["tea_alpha"])
            if writer is not None:
                alphas = [f"{a:.8f}" for a in rec["tea_alpha"]]
                writer.writerow([epoch, "train", f"{rec['train_loss']:.8f}", f"{rec['train_top1']:.6f}",
                                 f"{wall:.3f}"] + alphas)
                if "eval_top1" in rec:
                    writer.writerow([epoch, "eval", f"{rec['eval_loss']:.8f}", f"{rec['eval_top1']:.6f}",
                                     f"{wall:.3f}"] + alphas)
                fh.flush()
            if checkpoint_dir is not None:
                save_checkpoint(model, Path(checkpoint_dir) / f"epoch{epoch:03d}", epoch=epoch,
                                metrics={k: v for k, v in rec.items() if k != "tea_alpha_trace"})
    finally:
        if fh is not None:
            fh.close()
    return history


# -- gradient verification ------------------------------------------------------


def toy_gradcheck_config(**overrides) -> ModelConfig:
    base = dict(T=4, height=8, width=8, patch=4, dim=16, depth=2, heads=1, num_classes=3,
                neuron_mode=RELAXED, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def gradcheck_model(config: ModelConfig, batch=3, seed=0, h=1e-4, max_coords=64):
    """Finite-difference check of the full model loss; the model must be in relaxed mode."""
    if config.neuron_mode != RELAXED:
        raise ContractError("gradient check needs neuron_mode='relaxed'")
    model = Model(config)
    rng = np.random.default_rng(seed)
    # move theta off zero so the mask's derivative terms are all exercised
    for tea in model.tea_modules():
        tea.theta.data[:] = rng.normal(0.0, 0.5)
    x = rng.random((batch, config.in_channels, config.height, config.width))
    y = rng.integers(0, config.num_classes, size=batch)

    def loss():
        return nx.cross_entropy(model(x), y, 0.1)

    return nx.grad_check(loss, model.parameters(), h=h, max_coords=max_coords, seed=seed, relaxed=True)


# -- checkpoints ----------------------------------------------------------------


def _buffers(model: Model) -> dict:
    out = {}
    for bn in model.batchnorms():
        out[f"{bn.name}.running_mean"] = bn
        out[f"{bn.name}.running_var"] = bn
    return out


def save_checkpoint(model: Model, path, epoch=None, metrics=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in model.parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        arr.tofile(path / f"{p.name}.bin")
        entries.append({"name": p.name, "shape": list(p.shape), "dtype": "float32-le", "kind": "parameter"})
    for name, bn in _buffers(model).items():
        arr = bn.running_mean if name.endswith("running_mean") else bn.running_var
        np.ascontiguousarray(arr, dtype="<f4").tofile(path / f"{name}.bin")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32-le", "kind": "buffer"})
    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "parameters": entries,
        "epoch": epoch,
        "metrics": metrics or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float))
    return path


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint manifest ({exc})") from exc
    if manifest.get("magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {manifest.get('magic')!r}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}, "
                          f"this build reads version {CHECKPOINT_VERSION}")
    model = Model(ModelConfig.from_dict(manifest["config"]))
    params = model.named_parameters()
    buffers = _buffers(model)
    arrays = {}
    for e in manifest["parameters"]:
        name, shape = e["name"], tuple(e["shape"])
        target = params.get(name)
        if target is None and name not in buffers:
            raise FormatError(f"{path}: checkpoint has unknown parameter {name!r}")
        expected = target.shape if target is not None else (
            buffers[name].running_mean.shape)
        if shape != expected:
            raise FormatError(f"{path}: parameter {name!r} has shape {shape}, model expects {expected}")
        f = path / f"{name}.bin"
        if not f.exists():
            raise FormatError(f"{path}: missing array file for {name!r}")
        arr = np.fromfile(f, dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise FormatError(f"{path}: {name!r} holds {arr.size} values, expected {int(np.prod(shape))}")
        arrays[name] = arr.reshape(shape).astype(np.float32)
    missing = set(params) - set(arrays)
    if missing:
        raise FormatError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    # everything validated: only now mutate the model
    for name, arr in arrays.items():
        if name in params:
            params[name].data = arr
            params[name].grad = np.zeros_like(arr)
        elif name.endswith("running_mean"):
            buffers[name].running_mean = arr
        else:
            buffers[name].running_var = arr
    return model
