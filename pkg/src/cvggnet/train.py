"""Adam, the training loop, evaluation metrics and the variant-comparison harness."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Parameter, Tape, backward, zero_grads
from .data import ArrayDataset, save_checkpoint
from .layers import Activation, PoolVariant
from .models import Model, ModelSpec, amplitude_only_mode, build_model
from .tensor import ShapeError

log = logging.getLogger(__name__)

EVAL_BATCH = 64


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState, config: TrainConfig, grads=None) -> None:
    """One Adam update of every trainable real coordinate, in place.

    ``grads`` defaults to each parameter's accumulated gradient.  Frozen
    imaginary planes are neither updated nor given moments.
    """
    if grads is None:
        grads = [p.grad_planes() for p in params]
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter expected")
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    lr = config.learning_rate
    for p, g in zip(params, grads):
        if not p.trainable:
            continue
        g_re, g_im = g
        if g_re.shape != p.shape or g_im.shape != p.shape:
            raise ShapeError(f"{p.name}: gradient {g_re.shape} for parameter {p.shape}")
        key = p.name or str(id(p))
        if key not in state.m:
            state.m[key] = [np.zeros(p.shape, p.dtype), np.zeros(p.shape, p.dtype)]
            state.v[key] = [np.zeros(p.shape, p.dtype), np.zeros(p.shape, p.dtype)]
        m, v = state.m[key], state.v[key]
        if m[0].shape != p.shape:
            raise ShapeError(f"{p.name}: moment buffers {m[0].shape} for parameter {p.shape}")
        planes = [np.array(p.re), np.array(p.im)]
        for i, gi in enumerate((g_re, g_im)):
            if i == 1 and p.frozen_imag:
                continue
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            m_hat = m[i] / c1
            v_hat = v[i] / c2
            planes[i] = (planes[i] - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)).astype(p.dtype)
        p.set_planes(planes[0], planes[1])


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    per_class_accuracy: list[float]
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self, with_time: bool = False) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: list[float]
    confusion: np.ndarray  # [true, predicted] counts

    def confusion_csv(self, class_names=None) -> str:
        k = self.confusion.shape[0]
        names = list(class_names) if class_names else [str(i) for i in range(k)]
        rows = ["true\\pred," + ",".join(names)]
        for i in range(k):
            rows.append(names[i] + "," + ",".join(str(int(c)) for c in self.confusion[i]))
        return "\n".join(rows) + "\n"


def evaluate(model: Model, dataset: ArrayDataset, batch_size: int = EVAL_BATCH) -> EvalResult:
    """Accuracy, per-class accuracy and confusion matrix with BN in eval mode."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    k = model.spec.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        x, y = dataset.batch(idx)
        pred = model.predict(x)
        np.add.at(confusion, (y, pred), 1)
    totals = confusion.sum(axis=1)
    per_class = [float(confusion[i, i] / totals[i]) if totals[i] else 0.0 for i in range(k)]
    return EvalResult(float(np.trace(confusion) / confusion.sum()), per_class, confusion)


def _check_dataset(ds: ArrayDataset, model: Model, what: str) -> None:
    if len(ds) == 0:
        raise ValueError(f"{what} dataset is empty")
    if ds.labels.max() >= model.spec.num_classes or ds.labels.min() < 0:
        raise ValueError(f"{what} labels exceed the model's {model.spec.num_classes} classes")


def train(model: Model, train_set: ArrayDataset, test_set: ArrayDataset, config: TrainConfig,
          checkpoint_path=None, on_epoch=None, adam_state: AdamState | None = None):
    """Mini-batch Adam training; returns ``(history, adam_state)``.

    Deterministic for a fixed config: each epoch's shuffle draws from a
    generator seeded with ``(seed, epoch)``.  Raises :class:`DivergenceError`
    on a non-finite loss.
    """
    _check_dataset(train_set, model, "training")
    _check_dataset(test_set, model, "test")
    state = adam_state or AdamState()
    params = model.parameters()
    history: list[MetricsRecord] = []
    n = len(train_set)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n) if config.shuffle else np.arange(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = train_set.batch(idx)
            zero_grads(params)
            with Tape():
                loss, logits = model.loss(x, y, training=True)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
                backward(loss)
            adam_step(params, state, config)
            loss_sum += value * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
        result = evaluate(model, test_set)
        record = MetricsRecord(epoch, loss_sum / n, correct / n, result.accuracy, result.per_class_accuracy,
                               time.perf_counter() - t0)
        history.append(record)
        log.info("epoch %d loss %.4f train_acc %.3f test_acc %.3f", epoch, record.train_loss,
                 record.train_accuracy, record.test_accuracy)
        if on_epoch is not None:
            on_epoch(record)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, state)
    return history, state


# ---------------------------------------------------------------------------
# variant comparison


AXES = {
    "activation": [a.value for a in Activation],
    "pooling": [PoolVariant.AREA.value, PoolVariant.AMPLITUDE.value, PoolVariant.REAL_SPLIT.value],
}


@dataclass
class VariantResult:
    variant: str
    mean: float
    std: float
    accuracies: list[float]
    seeds: list[int]


def variant_spec(base: ModelSpec, axis: str, variant: str) -> ModelSpec:
    if axis == "activation":
        return replace(base, activation=Activation(variant).value)
    if axis == "pooling":
        pool = PoolVariant(variant).value
        return replace(base, blocks=tuple((k, pool if k == "pool" else a) for k, a in base.blocks))
    raise ValueError(f"unknown axis {axis!r}; choose from {sorted(AXES)}")


def _run_one(args) -> float:
    spec, train_set, test_set, config, amplitude_only = args
    model = build_model(spec, seed=config.seed)
    if amplitude_only:
        model = amplitude_only_mode(model)
    history, _ = train(model, train_set, test_set, config)
    return history[-1].test_accuracy


def compare_variants(base_spec: ModelSpec, axis: str, train_set: ArrayDataset, test_set: ArrayDataset,
                     config: TrainConfig, repeats: int = 1, workers: int = 1,
                     variants=None) -> list[VariantResult]:
    """Train every variant along ``axis`` ``repeats`` times; rank by mean final test accuracy.

    Repeat ``r`` uses seed ``config.seed + r`` for every variant, so variants
    are compared on identical initial seeds and shuffles.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; choose from {sorted(AXES)}")
    variants = list(variants or AXES[axis])
    seeds = [config.seed + r for r in range(repeats)]
    jobs = [(variant_spec(base_spec, axis, v), train_set, test_set, replace(config, seed=s), False)
            for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            accs = list(pool.map(_run_one, jobs))
    else:
        accs = [_run_one(j) for j in jobs]
    results = []
    for i, v in enumerate(variants):
        a = accs[i * repeats:(i + 1) * repeats]
        std = float(np.std(a, ddof=1)) if repeats > 1 else 0.0
        results.append(VariantResult(v, float(np.mean(a)), std, a, seeds))
    results.sort(key=lambda r: -r.mean)
    return results


def ranking_csv(results: list[VariantResult]) -> str:
    rows = ["variant,mean,std,runs"]
    for r in results:
        runs = ";".join(f"{s}:{a:.6f}" for s, a in zip(r.seeds, r.accuracies))
        rows.append(f"{r.variant},{r.mean:.6f},{r.std:.6f},{runs}")
    return "\n".join(rows) + "\n"
