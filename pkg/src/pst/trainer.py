"""Iterative sparse training loop, evaluation, and run reports."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import RunConfig
from .importance import ScoreConfig
from .masking import BinaryMask
from .models import Model, build_mlp, build_tiny_transformer
from .optim import AdamW, ParamGroup, clip_grad_norm
from .schedule import SparsitySchedule, lr_at, sparsity_at
from .tasks import Dataset, SyntheticTask, gen_planted_teacher, gen_sequence_task

__all__ = [
    "NumericalAbort",
    "LayerSnapshot",
    "RunReport",
    "Trainer",
    "build_task",
    "build_model",
    "make_optimizer",
    "evaluate",
    "train",
]


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, where: str, detail: str = ""):
        self.step, self.where = step, where
        msg = f"non-finite values at step {step} in {where}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


# ---------------------------------------------------------------------------
# construction from a config
# ---------------------------------------------------------------------------

def build_task(cfg: RunConfig) -> SyntheticTask:
    if cfg.task == "sequence":
        return gen_sequence_task(cfg.d, cfg.seq_len, cfg.samples, cfg.n_classes, cfg.task_seed)
    return gen_planted_teacher(
        cfg.n, cfg.k, cfg.samples, cfg.task_sparsity, cfg.noise_sigma, cfg.task_seed,
        shift_rank=cfg.shift_rank if cfg.task == "lowrank_shift" else 0,
        shift_scale=cfg.shift_scale, pretrain_noise=cfg.pretrain_noise,
    )


def _layer_kwargs(cfg: RunConfig) -> dict:
    return dict(
        criterion=cfg.criterion,
        variant=cfg.variant,
        freeze_weight=cfg.freeze_weight,
        score_config=ScoreConfig(alpha1=cfg.alpha1, alpha2=cfg.alpha2, beta=cfg.beta,
                                 r1=cfg.r1, r2=cfg.r2, legacy_alpha=cfg.legacy_alpha),
    )


def build_model(cfg: RunConfig, task: SyntheticTask) -> Model:
    kw = _layer_kwargs(cfg)
    if cfg.model == "transformer":
        return build_tiny_transformer(cfg.d, cfg.seed, seq_len=cfg.seq_len,
                                      n_classes=cfg.n_classes, n_blocks=cfg.n_blocks, **kw)
    n, k = task.train.y.shape[0], task.train.x.shape[0]
    if cfg.model == "linear":
        # single sparse layer initialised from the task's pretrained weight
        return build_mlp([k, n], cfg.seed, weights=[task.pretrained], activation="none", **kw)
    return build_mlp([k, *cfg.hidden(), n], cfg.seed, activation="relu", **kw)


def make_optimizer(model: Model, cfg: RunConfig) -> AdamW:
    decay = {"update": cfg.weight_decay, "weight": cfg.weight_decay, "head": cfg.weight_decay,
             "score": cfg.score_weight_decay, "bias": 0.0, "norm": 0.0}
    groups: dict[str, ParamGroup] = {}
    for name, t, group in model.parameters():
        if group not in groups:
            groups[group] = ParamGroup({}, weight_decay=decay[group],
                                       lr_scale=cfg.score_lr_scale if group == "score" else 1.0)
        groups[group].tensors[name] = t
    return AdamW(groups)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices of the mini-batch used at ``step``.

    Each epoch is a fresh permutation drawn from ``(seed, epoch)``, so the
    batch at any step is reproducible without carrying RNG state around.
    """
    per_epoch = math.ceil(n / batch_size)
    epoch, j = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
    return perm[j * batch_size:(j + 1) * batch_size]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _batch_metric(model: Model, x, y, sparsity: float) -> float:
    out = model.predict(x, sparsity)
    if model.task_type == "classification":
        return float(np.mean(np.argmax(out, axis=0) == y))
    return float(np.mean((out - y) ** 2))


def evaluate(model: Model, data: Dataset, sparsity: float, batch_size: int = 256,
             per_batch: list | None = None) -> float:
    """MSE (regression) or accuracy (classification), masks at the current scores.

    The result is the batch-size-weighted mean of per-batch metrics; pass a
    list as ``per_batch`` to receive the ``(size, metric)`` pairs.
    """
    n = len(data)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        m = _batch_metric(model, *data.batch(idx), sparsity)
        if per_batch is not None:
            per_batch.append((len(idx), m))
        total += len(idx) * m
    return total / n


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LayerSnapshot:
    name: str
    role: str
    depth: int
    criterion: str
    weight: np.ndarray
    score: np.ndarray
    mask: BinaryMask

    @property
    def finalized(self) -> np.ndarray:
        return self.weight * self.mask.as_float()


@dataclass(eq=False)
class RunReport:
    config: dict
    total_steps: int
    steps_completed: int
    losses: list[float]
    sparsities: list[float]
    lrs: list[float]
    metric_name: str
    final_metric: float
    eval_sparsity: float
    layers: dict[str, dict]
    masks: dict[str, BinaryMask]
    trainable_params: int
    optimizer_params: int
    accumulator_params: int
    score_update_params: int
    wall_clock_s: float = 0.0
    snapshots: dict[str, LayerSnapshot] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "total_steps": self.total_steps,
            "steps_completed": self.steps_completed,
            "metric_name": self.metric_name,
            "final_metric": self.final_metric,
            "eval_sparsity": self.eval_sparsity,
            "trainable_params": self.trainable_params,
            "optimizer_params": self.optimizer_params,
            "accumulator_params": self.accumulator_params,
            "score_update_params": self.score_update_params,
            "wall_clock_s": self.wall_clock_s,
            "losses": self.losses,
            "sparsities": self.sparsities,
            "lrs": self.lrs,
            "layers": self.layers,
            "masks": {k: m.to_strings() for k, m in self.masks.items()},
        }

    def comparable(self) -> dict:
        """Everything except wall-clock time, for determinism checks."""
        d = self.to_dict()
        d.pop("wall_clock_s")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        d["masks"] = {k: BinaryMask.from_strings(v) for k, v in d["masks"].items()}
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

StepCallback = Callable[..., None]


class Trainer:
    """Owns one model, its optimizer and the training history."""

    def __init__(self, config: RunConfig, task: SyntheticTask | None = None,
                 model: Model | None = None):
        self.config = config
        self.task = build_task(config) if task is None else task
        self.model = build_model(config, self.task) if model is None else model
        self.optimizer = make_optimizer(self.model, config)
        self.schedule = SparsitySchedule(config.target_p, config.total_steps,
                                         config.warmup_frac, config.cooldown_frac)
        self.step = 0
        self.losses: list[float] = []
        self.sparsities: list[float] = []
        self.lrs: list[float] = []
        self.elapsed = 0.0

    # -- single step ------------------------------------------------------------

    def _nonfinite_location(self, grads: T.GradResult | None) -> str:
        for layer in self.model.sparse_layers():
            if layer.last is not None and not np.all(np.isfinite(layer.last.eff.data)):
                return f"layer {layer.name}"
        for name, t, _ in self.model.parameters():
            if not np.all(np.isfinite(t.data)):
                return f"parameter {name}"
            if grads is not None and t in grads and not np.all(np.isfinite(grads[t])):
                return f"gradient of {name}"
        return "loss"

    def train_step(self, callback: StepCallback | None = None) -> float:
        cfg, t = self.config, self.step
        sparsity = sparsity_at(self.schedule, t)
        lr = lr_at(cfg.lr, t, cfg.total_steps)
        x, y = self.task.train.batch(
            batch_indices(len(self.task.train), cfg.batch_size, cfg.seed, t))

        # overflow surfaces as a NumericalAbort below, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            with T.Tape() as tape:
                loss = self.model.loss(x, y, sparsity)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalAbort(t, self._nonfinite_location(None), f"loss = {value}")
            grads = T.backward(tape, loss)

        contributions = {}
        for layer in self.model.sparse_layers():
            contributions[layer.name] = layer.accumulate(grads)

        pgrads = {}
        for name, p in self.optimizer.named_parameters():
            g = grads.get(p)
            pgrads[name] = np.zeros(p.shape) if g is None else g
            if not np.all(np.isfinite(pgrads[name])):
                raise NumericalAbort(t, self._nonfinite_location(grads), f"gradient of {name}")
        clip_grad_norm(pgrads, cfg.grad_clip)
        self.optimizer.step(pgrads, lr)

        self.losses.append(value)
        self.sparsities.append(sparsity)
        self.lrs.append(lr)
        self.step += 1
        if callback is not None:
            callback(step=t, trainer=self, grads=grads, contributions=contributions, loss=value)
        return value

    def run(self, stop_after: int | None = None, callback: StepCallback | None = None) -> RunReport:
        """Train up to ``stop_after`` total steps (default: all) and report."""
        end = self.config.total_steps if stop_after is None else min(stop_after, self.config.total_steps)
        start = time.perf_counter()
        while self.step < end:
            self.train_step(callback)
        self.elapsed += time.perf_counter() - start
        return self.report()

    # -- reporting -------------------------------------------------------------

    def eval_sparsity(self) -> float:
        return sparsity_at(self.schedule, self.step)

    def snapshots(self, sparsity: float | None = None) -> dict[str, LayerSnapshot]:
        sp = self.eval_sparsity() if sparsity is None else sparsity
        out = {}
        for layer in self.model.sparse_layers():
            out[layer.name] = LayerSnapshot(layer.name, layer.role, layer.depth, layer.criterion,
                                            layer.weight_values(), layer.score_values(),
                                            layer.mask_at(sp))
        return out

    def report(self) -> RunReport:
        model, cfg = self.model, self.config
        sp = self.eval_sparsity()
        metric = evaluate(model, self.task.test, sp)
        snaps = self.snapshots(sp)
        layers = {}
        score_update = 0
        opt_names = {name for name, _ in self.optimizer.named_parameters()}
        for layer in model.sparse_layers():
            snap = snaps[layer.name]
            n, k = layer.shape
            owned = sum(t.data.size for name, t, group in layer.parameters()
                        if group != "bias" and name in opt_names)
            owned += sum(a.size for _, a in layer.accumulators())
            score_update += owned
            layers[layer.name] = {
                "role": layer.role, "depth": layer.depth, "criterion": layer.criterion,
                "rows": n, "cols": k, "kept": snap.mask.v,
                "nonzeros": int(np.count_nonzero(snap.finalized)),
                "score_update_params": owned,
            }
        acc = sum(a.size for _, a in model.accumulators())
        n_opt = self.optimizer.num_parameters()
        return RunReport(
            config=cfg.to_dict(),
            total_steps=cfg.total_steps,
            steps_completed=self.step,
            losses=list(self.losses),
            sparsities=list(self.sparsities),
            lrs=list(self.lrs),
            metric_name="accuracy" if model.task_type == "classification" else "mse",
            final_metric=metric,
            eval_sparsity=sp,
            layers=layers,
            masks={name: s.mask for name, s in snaps.items()},
            trainable_params=n_opt + acc,
            optimizer_params=n_opt,
            accumulator_params=acc,
            score_update_params=score_update,
            wall_clock_s=self.elapsed,
            snapshots=snaps,
        )

    # -- persistence -------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        arrays = {f"model.{k}": v for k, v in self.model.state_tensors().items()}
        for name in self.optimizer.m:
            arrays[f"adam.m.{name}"] = self.optimizer.m[name]
            arrays[f"adam.v.{name}"] = self.optimizer.v[name]
        arrays["history.loss"] = np.array(self.losses, dtype=np.float64).reshape(1, -1)
        arrays["history.sparsity"] = np.array(self.sparsities, dtype=np.float64).reshape(1, -1)
        arrays["history.lr"] = np.array(self.lrs, dtype=np.float64).reshape(1, -1)
        arrays["history.elapsed"] = np.array([[self.elapsed]])
        meta = {
            "step": self.step,
            "total_steps": self.config.total_steps,
            "seed": self.config.seed,
            "task_seed": self.config.task_seed,
            "optimizer_steps": self.optimizer.step_count,
            "config": self.config.to_toml(),
        }
        return Checkpoint(meta=meta, arrays=arrays)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: RunConfig | None = None) -> "Trainer":
        if config is None:
            from .config import tomllib
            config = RunConfig.from_dict(tomllib.loads(ckpt.meta["config"]))
        self = cls(config)
        a = ckpt.arrays
        self.model.load_state_tensors({k[len("model."):]: v for k, v in a.items()
                                       if k.startswith("model.")})
        for name in self.optimizer.m:
            self.optimizer.m[name] = a[f"adam.m.{name}"].copy()
            self.optimizer.v[name] = a[f"adam.v.{name}"].copy()
        self.optimizer.step_count = int(ckpt.meta["optimizer_steps"])
        self.step = int(ckpt.meta["step"])
        self.losses = a["history.loss"].ravel().tolist()
        self.sparsities = a["history.sparsity"].ravel().tolist()
        self.lrs = a["history.lr"].ravel().tolist()
        self.elapsed = float(a["history.elapsed"][0, 0])
        return self


def train(model: Model, data: SyntheticTask, config: RunConfig,
          callback: StepCallback | None = None) -> RunReport:
    return Trainer(config, task=data, model=model).run(callback=callback)
