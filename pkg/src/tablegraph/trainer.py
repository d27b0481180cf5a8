"""Training loop over sampled vertex pairs."""
from __future__ import annotations

import json
import math
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import engine as E
from .graph import KINDS
from .model import ModelConfig, TableGraphModel

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.bin"
RUNLOG = "runlog.jsonl"
LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    data: str = ""
    out: str = ""
    model: str = "dgcnn_star"
    epochs: int = 10
    steps: int | None = None  # overrides epochs when set
    batch_size: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    s: int = 10
    seed: int = 0
    eval_every: int = 0
    eval_limit: int = 32
    dtype: str = "float64"
    lr_schedule: str = "constant"  # or "cosine": decays to zero at the last step
    model_config: dict = field(default_factory=dict)

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.epochs < 0 or self.lr < 0 or self.weight_decay < 0:
            raise ValueError("epochs, lr and weight_decay must be non-negative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")

    def build_model_config(self, image_hw=None) -> ModelConfig:
        d = dict(self.model_config)
        if image_hw is not None:  # image size follows the data unless configured
            d.setdefault("image_h", int(image_hw[0]))
            d.setdefault("image_w", int(image_hw[1]))
        d.setdefault("kind", self.model)
        d.setdefault("dtype", self.dtype)
        d.setdefault("init_seed", self.seed)
        return ModelConfig.from_dict(d)

    def total_steps(self, n_tables: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * -(-n_tables // self.batch_size)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class RunLog:
    """Append-only JSON-lines log of per-step losses and pair accuracies."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def append(self, record: dict):
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("run log steps must increase")
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def pair_labels(gt_matrix: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    v = pairs.shape[0]
    return gt_matrix[np.arange(v)[:, None], pairs].astype(np.int64)


def pair_loss(logits: dict, pairs: dict, gt) -> tuple[E.Tensor, dict[str, E.Tensor]]:
    """Mean cross-entropy per head over its sampled pairs; total is the plain sum."""
    per_head = {}
    for head in KINDS:
        lg = logits[head]
        if lg.shape[:2] != pairs[head].shape or lg.shape[-1] != 2:
            raise E.ShapeMismatch(f"pair_loss[{head}]: logits {lg.shape} vs pairs {pairs[head].shape}")
        per_head[head] = E.softmax_xent(lg, pair_labels(gt[head], pairs[head]))
    total = E.add(E.add(per_head["cells"], per_head["rows"]), per_head["cols"])
    return total, per_head


def pair_accuracy(logits: E.Tensor, labels: np.ndarray) -> float:
    return float((np.argmax(logits.data, axis=-1) == labels).mean())


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "cosine" and total > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
    return cfg.lr


def schedule(n_tables: int, batch_size: int, step: int, seed: int) -> list[int]:
    """Table indices consumed by ``step``: a fresh permutation per epoch."""
    out = []
    for b in range(batch_size):
        pos = step * batch_size + b
        epoch, offset = divmod(pos, n_tables)
        perm = np.random.default_rng([seed, epoch]).permutation(n_tables)
        out.append(int(perm[offset]))
    return out


def train_state(model: TableGraphModel, opt: E.Adam, step: int) -> dict:
    state = dict(model.params.state())
    state.update(opt.state())
    state["trainer/step"] = np.array([step], dtype=np.int64)
    return state


def train(cfg: TrainConfig, samples=None, resume=None, eval_fn=None, timestamps: bool = True):
    """Train a model; returns ``(checkpoint_path, runlog, model)``.

    ``samples`` defaults to the dataset at ``cfg.data``. ``resume`` is a
    checkpoint written by an earlier run with the same config and seed; the
    run continues from its step and reproduces the uninterrupted trajectory.
    ``eval_fn(model) -> dict`` is called every ``cfg.eval_every`` steps.
    """
    from .dataset import load_dataset

    cfg.validate()
    if samples is None:
        samples = [s for _, s in load_dataset(cfg.data)]
    if not samples:
        raise ValueError("no training samples")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    mcfg = cfg.build_model_config(samples[0].image.shape)
    model = TableGraphModel(mcfg)
    opt = E.Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    start = 0
    if resume is not None:
        state = E.load_checkpoint(resume)
        model.load_params(state)
        opt.load_state(state)
        start = int(state["trainer/step"][0])

    (out / "model.json").write_text(mcfg.to_json())
    (out / "train.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=2) + "\n")
    ckpt = out / CHECKPOINT
    runlog = RunLog(out / RUNLOG)
    if start == 0 and runlog.path.exists():
        runlog.path.unlink()

    total = cfg.total_steps(len(samples))
    for step in range(start, total):
        model.params.zero_grad()
        losses = {h: 0.0 for h in KINDS}
        accs = {h: 0.0 for h in KINDS}
        try:
            for b, idx in enumerate(schedule(len(samples), cfg.batch_size, step, cfg.seed)):
                sample = samples[idx]
                rng = np.random.default_rng([cfg.seed, step, b])
                res = model.forward(sample, "train", cfg.s, rng)
                loss, per_head = pair_loss(res.logits, res.pairs, sample.gt)
                E.backward(E.mul(loss, 1.0 / cfg.batch_size))
                for h in KINDS:
                    losses[h] += float(per_head[h].data) / cfg.batch_size
                    accs[h] += pair_accuracy(res.logits[h], pair_labels(sample.gt[h], res.pairs[h])) / cfg.batch_size
            before = {k: t.data for k, t in model.params.items()}
            opt.lr = learning_rate(cfg, step, total)
            opt.step(model.params)
            for name, t in model.params.items():
                if not np.all(np.isfinite(t.data)):
                    for k, p in model.params.items():
                        p.data = before[k]
                    raise E.NonFinite(f"parameter {name} became non-finite at step {step}")
        except E.NonFinite:
            model.save(ckpt, {**opt.state(), "trainer/step": np.array([step], dtype=np.int64)})
            log.error("non-finite values at step %d; last good parameters kept in %s", step, ckpt)
            raise

        record = {
            "step": step,
            "loss": losses,
            "total": sum(losses.values()),
            "pair_accuracy": accs,
        }
        if timestamps:
            record["time"] = time.time()
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            E.save_checkpoint(ckpt, train_state(model, opt, step + 1))
            if eval_fn is not None:
                record["eval"] = eval_fn(model)
                log.info("step %d eval %s", step + 1, record["eval"])
        runlog.append(record)
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, record["total"])

    E.save_checkpoint(ckpt, train_state(model, opt, max(total, start)))
    return ckpt, runlog, model
