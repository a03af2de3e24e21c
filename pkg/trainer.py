"""
Trainer module for the DiG desk implementation.
Training configuration, the AdamW optimizer, the EMA of model weights, the
training loop with JSON-lines metrics, checkpointing and EMA sampling.
"""
import dataclasses
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from datasets import make_toy_dataset, prefetch
from diffusion import SCHEDULES, NoiseSchedule, p_sample_loop, training_losses
from model import ModelConfig, build_model, read_toml
from tensor import ConfigError, NumericError, Tensor, global_norm, load_tensors, save_tensors
from utils import append_jsonl

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, EMA, loss weighting and bookkeeping of one training run."""

    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    ema_decay: float = 0.9999
    lambda_vb: float = 1.0
    noise_schedule: str = "linear"
    log_every: int = 100
    checkpoint_every: int = 0
    grad_clip: float = None
    seed: int = 0
    dataset: str = "gaussian_mixture"
    dataset_size: int = 4096
    prefetch: int = 2

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.grad_clip:
            object.__setattr__(self, "grad_clip", None)
        checks = [
            (self.steps >= 0, "steps must be non-negative"),
            (self.batch_size >= 1, "batch size must be >= 1"),
            (self.lr > 0, "learning rate must be positive"),
            (self.weight_decay >= 0, "weight decay must be non-negative"),
            (len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas),
             f"betas must be two values in [0, 1), got {self.betas}"),
            (0 <= self.ema_decay < 1, "ema_decay must lie in [0, 1)"),
            (self.lambda_vb >= 0, "lambda_vb must be non-negative"),
            (self.noise_schedule in SCHEDULES,
             f"noise_schedule must be one of {', '.join(SCHEDULES)}"),
            (self.log_every >= 0 and self.checkpoint_every >= 0, "intervals must be non-negative"),
            (self.grad_clip is None or self.grad_clip > 0, "grad_clip must be positive"),
            (self.dataset_size >= 1, "dataset size must be >= 1"),
            (self.prefetch >= 0, "prefetch depth must be non-negative"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**values)


def load_config(path):
    """(ModelConfig, TrainConfig) from a TOML file with [model] and optional [train]."""
    data = read_toml(path)
    extra = sorted(set(data) - {"model", "train"})
    if extra:
        raise ConfigError(f"{path}: unknown tables {', '.join(extra)}")
    if "model" not in data:
        raise ConfigError(f"{path}: missing [model] table")
    return ModelConfig.from_dict(data["model"]), TrainConfig.from_dict(data.get("train", {}))


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - self.lr * update

    def state_dict(self):
        return {"m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()},
                "step_count": self.step_count}

    def load_state_dict(self, state):
        for key in ("m", "v"):
            stored = state[key]
            if set(stored) != set(self.params):
                raise ConfigError(f"optimizer {key} moments do not match the model parameters")
            setattr(self, key, {k: np.array(stored[k], dtype=np.float64) for k in self.params})
        self.step_count = int(state["step_count"])


class EMA:
    """Exponential moving average of model parameters."""

    def __init__(self, model, decay=0.9999):
        self.model = model
        self.decay = decay
        self.shadow = {name: p.data.copy() for name, p in model.named_parameters()}
        self.backup = {}

    def update(self):
        """shadow <- decay * shadow + (1 - decay) * params."""
        for name, p in self.model.named_parameters():
            self.shadow[name] = self.decay * self.shadow[name] + (1.0 - self.decay) * p.data

    def apply_shadow(self):
        """Swap the EMA weights into the model."""
        for name, p in self.model.named_parameters():
            self.backup[name] = p.data
            p.data = self.shadow[name].copy()

    def restore(self):
        for name, p in self.model.named_parameters():
            if name not in self.backup:
                raise ConfigError(f"no backup for {name}; apply_shadow was not called")
            p.data = self.backup[name]
        self.backup = {}

    def load(self, shadow):
        if set(shadow) != set(self.shadow):
            raise ConfigError("EMA weights do not match the model parameters")
        self.shadow = {k: np.array(shadow[k], dtype=np.float64) for k in self.shadow}


@dataclass
class TrainState:
    """Everything a run mutates; the single training thread owns it."""

    model_cfg: ModelConfig
    train_cfg: TrainConfig
    model: object
    optimizer: AdamW
    ema: EMA
    schedule: NoiseSchedule
    step: int = 0
    history: list = field(default_factory=list)

    @property
    def seed(self):
        return self.train_cfg.seed

    @property
    def params(self):
        return self.model.state_dict()

    @property
    def ema_params(self):
        return {k: v.copy() for k, v in self.ema.shadow.items()}


def init_state(model_cfg, train_cfg):
    """Fresh model, optimizer and EMA for a run."""
    model = build_model(model_cfg, seed=train_cfg.seed)
    optimizer = AdamW(model.named_parameters(), lr=train_cfg.lr, betas=train_cfg.betas,
                      eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
    return TrainState(model_cfg, train_cfg, model, optimizer,
                      EMA(model, train_cfg.ema_decay),
                      NoiseSchedule.named(train_cfg.noise_schedule, model_cfg.timesteps))


def dataset_for(model_cfg, train_cfg, seed=None):
    """The toy dataset named by train_cfg, shaped for model_cfg."""
    return make_toy_dataset(train_cfg.dataset, train_cfg.dataset_size,
                            seed=train_cfg.seed if seed is None else seed,
                            size=model_cfg.input_size, channels=model_cfg.in_channels)


def _check_dataset(cfg, dataset):
    expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if dataset.images.shape[1:] != expected:
        raise ConfigError(f"dataset images {dataset.images.shape[1:]} do not fit model "
                          f"input {expected}")
    if dataset.num_classes > cfg.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model embeds "
                          f"{cfg.num_classes}")


def clip_gradients(params, max_norm):
    """Scale gradients in place to a global norm of at most max_norm; return the norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def train_step(state, x0, y):
    """One optimizer step on a batch; returns the metrics record."""
    cfg = state.train_cfg
    rng = np.random.default_rng([cfg.seed, 1, state.step])
    t = rng.integers(0, state.schedule.num_steps, len(x0))
    eps = rng.standard_normal(x0.shape)
    model = state.model
    model.zero_grad()
    try:
        losses = training_losses(model, Tensor(x0), t, y, eps, state.schedule, cfg.lambda_vb)
        loss = losses["loss"].item()
        if not np.isfinite(loss):
            raise NumericError(f"loss is {loss}")
        losses["loss"].backward()
    except NumericError as exc:
        raise NumericError(f"{exc} at step {state.step}", step=state.step) from exc
    grad_norm = clip_gradients(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.ema.update()
    state.step += 1
    vb = losses["loss_vb"]
    return {"step": state.step, "loss_simple": losses["loss_simple"].item(),
            "loss_vb": None if vb is None else vb.item(), "grad_norm": grad_norm}


def train(model_cfg, train_cfg, dataset=None, steps=None, out_dir=None, state=None,
          progress=False):
    """Run `steps` optimizer steps (default train_cfg.steps) and return the TrainState.

    Batches and per-step noise are functions of (seed, step), so a resumed run
    continues exactly where an uninterrupted one would be.
    """
    state = state if state is not None else init_state(model_cfg, train_cfg)
    train_cfg = state.train_cfg
    steps = train_cfg.steps if steps is None else steps
    dataset = dataset if dataset is not None else dataset_for(model_cfg, train_cfg)
    _check_dataset(model_cfg, dataset)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    batches = dataset.batches(train_cfg.batch_size, np.random.default_rng([train_cfg.seed, 0]))
    batches = itertools.islice(batches, state.step, None)
    stream = prefetch(batches, train_cfg.prefetch) if train_cfg.prefetch else batches
    logger.info("training %s for %d steps from step %d (batch %d, lr %g)", model_cfg.name,
                steps, state.step, train_cfg.batch_size, train_cfg.lr)
    started = time.perf_counter()
    try:
        for _ in tqdm(range(steps), desc="training", disable=not progress):
            x0, y = next(stream)
            record = train_step(state, x0, y)
            record["wallclock_ms"] = round(1000.0 * (time.perf_counter() - started), 3)
            state.history.append(record)
            if train_cfg.log_every and state.step % train_cfg.log_every == 0:
                logger.info("step %d: loss_simple %.5f loss_vb %s grad_norm %.4f", state.step,
                            record["loss_simple"], _fmt(record["loss_vb"]), record["grad_norm"])
                if out_dir is not None:
                    append_jsonl(out_dir / "metrics.jsonl", record)
            if (out_dir is not None and train_cfg.checkpoint_every
                    and state.step % train_cfg.checkpoint_every == 0):
                save_checkpoint(state, out_dir / "checkpoint")
    finally:
        if hasattr(stream, "close"):
            stream.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "checkpoint")
    return state


def _fmt(value):
    return "n/a" if value is None else f"{value:.5f}"


def save_checkpoint(state, directory):
    """Write config.json, params.bin, ema.bin, adam_m.bin, adam_v.bin and state.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = {"model": state.model_cfg.to_dict(), "train": state.train_cfg.to_dict()}
    (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    save_tensors(directory / "params.bin", state.model.state_dict())
    save_tensors(directory / "ema.bin", state.ema.shadow)
    moments = state.optimizer.state_dict()
    save_tensors(directory / "adam_m.bin", moments["m"])
    save_tensors(directory / "adam_v.bin", moments["v"])
    meta = {"step": state.step, "seed": state.seed, "optimizer_steps": moments["step_count"]}
    (directory / "state.json").write_text(json.dumps(meta, indent=2))
    logger.debug("checkpoint at step %d written to %s", state.step, directory)


def load_checkpoint(directory):
    """Rebuild a TrainState saved by save_checkpoint."""
    directory = Path(directory)
    if not (directory / "state.json").exists():
        raise ConfigError(f"no checkpoint in {directory}")
    config = json.loads((directory / "config.json").read_text())
    state = init_state(ModelConfig.from_dict(config["model"]),
                       TrainConfig.from_dict(config["train"]))
    meta = json.loads((directory / "state.json").read_text())
    state.model.load_state_dict(load_tensors(directory / "params.bin"))
    state.ema.load(load_tensors(directory / "ema.bin"))
    state.optimizer.load_state_dict({"m": load_tensors(directory / "adam_m.bin"),
                                     "v": load_tensors(directory / "adam_v.bin"),
                                     "step_count": meta["optimizer_steps"]})
    state.step = int(meta["step"])
    return state


def sample_from_state(state, num_samples, seed=0, labels=None, progress=False):
    """Ancestral samples [n, C, I, I] drawn with the EMA weights."""
    cfg = state.model_cfg
    if labels is None:
        labels = np.arange(num_samples) % cfg.num_classes
    shape = (num_samples, cfg.in_channels, cfg.input_size, cfg.input_size)
    state.ema.apply_shadow()
    try:
        return p_sample_loop(state.model, shape, labels, state.schedule, seed=seed,
                             progress=progress)
    finally:
        state.ema.restore()
