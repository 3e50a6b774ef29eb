"""Forward-only adaptation of BN running statistics to a new domain.

Each adaptation sample is pushed through the frozen model in train mode, with
every BN layer's momentum set to the next value of the adaptive schedule
``alpha_k = omega * alpha_{k-1} + delta``. Nothing but the running mean and
variance changes. The resulting statistics are stored per task ID and
swapped back in at inference time, so earlier domains are never overwritten.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .batchnorm import BNSnapshot, bn_restore, bn_snapshot
from .errors import ConfigError, RegistryError

SELECTION_POLICIES = ("final-k", "best-labeled")
BATCH_POLICIES = ("single-sample", "replicate-with-noise")


@dataclass(frozen=True)
class MomentumSchedule:
    alpha0: float = 0.1
    omega: float = 0.94
    delta: float = 0.05
    k: int = 10

    def __post_init__(self):
        if not 0.0 < self.delta < self.alpha0:
            raise ConfigError(f"need 0 < delta < alpha0, got delta={self.delta}, alpha0={self.alpha0}")
        if not 0.0 < self.omega < 1.0:
            raise ConfigError(f"omega must lie in (0, 1), got {self.omega}")
        if self.alpha0 > 1.0:
            raise ConfigError("alpha0 must not exceed 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")

    @property
    def fixed_point(self) -> float:
        return self.delta / (1.0 - self.omega)

    def with_k(self, k: int) -> "MomentumSchedule":
        return MomentumSchedule(self.alpha0, self.omega, self.delta, k)


# The default (omega, delta) drive alpha up towards 0.833; "decaying" keeps
# the same omega but lets alpha shrink towards 0.0833.
SCHEDULE_PRESETS = {
    "rising": MomentumSchedule(0.1, 0.94, 0.05),
    "decaying": MomentumSchedule(0.1, 0.94, 0.005),
}


def momentum_sequence(schedule: MomentumSchedule) -> list[float]:
    """[alpha_1, ..., alpha_K] from the recurrence (not the closed form)."""
    alphas = []
    alpha = schedule.alpha0
    for _ in range(schedule.k):
        alpha = alpha * schedule.omega
        alpha = alpha + schedule.delta
        alphas.append(alpha)
    return alphas


def momentum_closed_form(schedule: MomentumSchedule, k: int) -> float:
    w = schedule.omega**k
    return w * schedule.alpha0 + schedule.delta * (1.0 - w) / (1.0 - schedule.omega)


@dataclass(frozen=True)
class AdaptationConfig:
    schedule: MomentumSchedule = field(default_factory=MomentumSchedule)
    selection: str = "final-k"
    batch_policy: str = "single-sample"
    replicas: int = 8
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.selection not in SELECTION_POLICIES:
            raise ConfigError(f"selection must be one of {SELECTION_POLICIES}")
        if self.batch_policy not in BATCH_POLICIES:
            raise ConfigError(f"batch_policy must be one of {BATCH_POLICIES}")
        if self.batch_policy == "replicate-with-noise" and (self.replicas < 2 or self.noise_std < 0):
            raise ConfigError("replicate-with-noise needs replicas >= 2 and noise_std >= 0")


class DomainStatsRegistry:
    """Insertion-ordered map task ID -> immutable :class:`BNSnapshot`."""

    def __init__(self):
        self._entries: OrderedDict = OrderedDict()

    def add(self, task_id, snapshot: BNSnapshot) -> BNSnapshot:
        if task_id in self._entries:
            raise RegistryError(f"task {task_id!r} already has statistics")
        if snapshot.label != task_id:
            snapshot = snapshot.relabel(task_id)
        self._entries[task_id] = snapshot
        return snapshot

    def __getitem__(self, task_id) -> BNSnapshot:
        try:
            return self._entries[task_id]
        except KeyError:
            raise RegistryError(f"unknown task id {task_id!r}; known: {list(self._entries)}") from None

    def __contains__(self, task_id):
        return task_id in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def base(self) -> BNSnapshot | None:
        """The first registered snapshot (the statistics of the base model)."""
        return next(iter(self._entries.values()), None)


def _adaptation_batch(x, config: AdaptationConfig, rng) -> np.ndarray:
    x = np.asarray(x)[None]
    if config.batch_policy == "single-sample":
        return x
    reps = np.repeat(x, config.replicas, axis=0)
    return reps + config.noise_std * rng.standard_normal(reps.shape)


def _labeled_accuracy(model, xs, ys) -> float:
    return float((model.predict(xs) == ys).mean())


def adapt_domain(model, registry: DomainStatsRegistry, task_id, samples, config: AdaptationConfig) -> BNSnapshot:
    """Adapt BN statistics on ``samples`` (list of ``(x, label or None)``) and register them.

    Adaptation starts from the base statistics (the registry's first entry),
    or from the model's current statistics if the registry is empty. Only BN
    running statistics change; BN momenta are put back afterwards. The model
    is left holding the registered statistics.
    """
    if task_id in registry:
        raise RegistryError(f"task {task_id!r} already has statistics")
    schedule = config.schedule
    if len(samples) != schedule.k:
        raise ConfigError(f"schedule expects K={schedule.k} samples, got {len(samples)}")
    xs = np.stack([np.asarray(x) for x, _ in samples])
    labels = [y for _, y in samples]
    if config.selection == "best-labeled" and any(y is None for y in labels):
        raise ConfigError("best-labeled selection needs a label for every adaptation sample")

    states = model.bn_states()
    saved_momenta = [s.momentum for s in states]
    before = bn_snapshot(model)
    if registry.base is not None:
        bn_restore(model, registry.base)
    rng = None
    if config.batch_policy != "single-sample":
        rng = np.random.default_rng([config.seed, zlib.crc32(str(task_id).encode())])

    alphas = momentum_sequence(schedule)
    best = None  # (score, k, snapshot)
    ys = np.array(labels) if config.selection == "best-labeled" else None
    try:
        for k, (alpha, x) in enumerate(zip(alphas, xs), start=1):
            for s in states:
                s.momentum = alpha
            model.forward(_adaptation_batch(x, config, rng), "train", retain=False)
            if config.selection == "best-labeled":
                score = _labeled_accuracy(model, xs, ys)
                if best is None or score >= best[0]:
                    best = (score, k, bn_snapshot(model))
    except Exception:
        bn_restore(model, before)
        raise
    finally:
        for s, m in zip(states, saved_momenta):
            s.momentum = m

    meta = {"selection": config.selection, "batch_policy": config.batch_policy, "k_total": schedule.k,
            "alpha_final": alphas[-1]}
    if best is not None:
        bn_restore(model, best[2])
        snapshot = best[2].relabel(task_id, k_selected=best[1], labeled_accuracy=best[0], **meta)
    else:
        snapshot = bn_snapshot(model, task_id, k_selected=schedule.k, **meta)
    return registry.add(task_id, snapshot)


def predict_with_task(model, registry: DomainStatsRegistry, task_id, x: np.ndarray) -> np.ndarray:
    """Restore ``task_id``'s statistics, then eval-mode argmax over a batch.

    Leaves the model holding that task's statistics.
    """
    bn_restore(model, registry[task_id])
    return model.predict(x)


def infer_with_task(model, registry: DomainStatsRegistry, task_id, x):
    """Predicted class for one sample (or an array of classes for a batch)."""
    x = np.asarray(x)
    single = x.shape == model.config.input_shape
    preds = predict_with_task(model, registry, task_id, x[None] if single else x)
    return int(preds[0]) if single else preds


def recompute_bn_statistics(model, x: np.ndarray, batch_size: int = 256) -> BNSnapshot:
    """Exact population statistics of every BN input over the whole of ``x``.

    Layers are processed in order; each BN layer's statistics are fixed
    before the data is pushed through to the next one, so every layer sees
    the inputs the final eval-mode model will produce. The model is left
    holding the recomputed statistics.
    """
    bn_layers = [i for i, layer in enumerate(model.layers) if layer.kind == "batchnorm"]
    acts = np.asarray(x, dtype=model.dtype)
    start = 0
    for idx in bn_layers:
        chunks = []
        for b in range(0, len(acts), batch_size):
            h = acts[b : b + batch_size]
            for layer in model.layers[start:idx]:
                h = layer.forward(h, False, False)
            chunks.append(h)
        acts = np.concatenate(chunks)
        flat = acts.reshape(-1, acts.shape[-1]).astype(np.float64)
        state = model.layers[idx].state
        state.running_mean = flat.mean(axis=0).astype(state.running_mean.dtype)
        state.running_var = flat.var(axis=0).astype(state.running_var.dtype)
        start = idx
    return bn_snapshot(model)
