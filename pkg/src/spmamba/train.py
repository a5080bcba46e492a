"""AdamW with a one-cycle cosine schedule, and the training/evaluation loops."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import MetricState, augment
from .network import Model, ScenePyramid, prepare, segment_forward
from .sparse import PointCloud
from .tensor import NonFiniteError, no_grad


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss or activation at step {step}: {detail}")
        self.step = step


@dataclass
class TrainConfig:
    max_lr: float = 5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 12
    warmup_fraction: float = 0.05
    div_factor: float = 10.0
    final_div_factor: float = 1000.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.max_lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("max_lr, epochs and batch_size must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def one_cycle_lr(step: int, total_steps: int, max_lr: float, warmup_fraction: float = 0.05,
                 div_factor: float = 10.0, final_div_factor: float = 1000.0) -> float:
    """Cosine warm-up from max_lr/div_factor to max_lr, then cosine decay to
    max_lr/(div_factor*final_div_factor) at the last step."""
    initial = max_lr / div_factor
    final = initial / final_div_factor
    peak = max(1, int(round(warmup_fraction * total_steps)))
    last = max(total_steps - 1, peak + 1)

    def cos_anneal(start, end, pct):
        return end + (start - end) / 2.0 * (math.cos(math.pi * pct) + 1.0)

    if step <= peak:
        return cos_anneal(initial, max_lr, step / peak)
    return cos_anneal(max_lr, final, min(1.0, (step - peak) / (last - peak)))


class AdamW:
    """Adam moments with weight decay decoupled from the gradient."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class Trainer:
    model: Model
    cfg: TrainConfig
    steps_per_epoch: int
    step: int = 0
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        c = self.cfg
        self.opt = AdamW(self.model.params, c.max_lr, c.betas, c.eps, c.weight_decay)
        self.total_steps = max(1, c.epochs * self.steps_per_epoch)
        self._cache: dict[int, ScenePyramid] = {}

    def lr_at(self, step: int) -> float:
        c = self.cfg
        return one_cycle_lr(step, self.total_steps, c.max_lr, c.warmup_fraction, c.div_factor, c.final_div_factor)

    def _pyramid(self, idx: int, pc: PointCloud, aug_seed: int) -> tuple[ScenePyramid, np.ndarray]:
        if self.cfg.augment:
            pc = augment(pc, aug_seed)
            return prepare(pc, self.model.cfg), pc.labels
        if idx not in self._cache:
            self._cache[idx] = prepare(pc, self.model.cfg)
        return self._cache[idx], pc.labels

    def train_step(self, batch: list[tuple[int, PointCloud]]) -> float:
        """One optimizer step on the mean loss over ``batch``."""
        params = self.model.params
        params.zero_grad()
        rng = np.random.default_rng([self.cfg.seed, self.step])
        total = 0.0
        try:
            for idx, pc in batch:
                pyr, labels = self._pyramid(idx, pc, int(rng.integers(2**31)))
                logits = segment_forward(self.model, pyr, rng)
                loss = T.cross_entropy(logits, labels) * (1.0 / len(batch))
                loss.backward()
                total += loss.item()
        except NonFiniteError as exc:
            raise TrainingDiverged(self.step, str(exc)) from exc
        if not math.isfinite(total):
            raise TrainingDiverged(self.step, f"loss={total}")
        self.opt.lr = self.lr_at(self.step)
        self.opt.step()
        self.step += 1
        self.losses.append(total)
        return total


def train_epoch(trainer: Trainer, dataset: list[PointCloud]) -> list[float]:
    """Shuffle scenes deterministically, then step through batches; returns per-step losses."""
    epoch = trainer.step // max(trainer.steps_per_epoch, 1)
    order = np.random.default_rng([trainer.cfg.seed, 10_000 + epoch]).permutation(len(dataset))
    bs = trainer.cfg.batch_size
    out = []
    for start in range(0, len(order), bs):
        batch = [(int(i), dataset[int(i)]) for i in order[start:start + bs]]
        out.append(trainer.train_step(batch))
    return out


def make_trainer(model: Model, cfg: TrainConfig, n_scenes: int) -> Trainer:
    return Trainer(model, cfg, steps_per_epoch=math.ceil(n_scenes / cfg.batch_size))


def predict(model: Model, pc: PointCloud) -> np.ndarray:
    with no_grad():
        return segment_forward(model, pc).data.argmax(axis=1)


def evaluate(model: Model, dataset: list[PointCloud]) -> MetricState:
    st = MetricState(model.cfg.num_classes)
    for pc in dataset:
        if pc.labels is None:
            raise ValueError("evaluation needs labelled clouds")
        st.update(predict(model, pc), pc.labels)
    return st
