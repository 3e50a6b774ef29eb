"""Incremental-learning protocols over a stream of domains.

Every strategy starts step 1 from the same trained base model and, after each
later step, evaluates on the test split of every domain seen so far:

* ``base``      never changes the base model
* ``fe``        retrains only the classifier layer on each new domain
* ``ft``        fine-tunes every parameter on each new domain
* ``disjoint``  trains a fresh copy of the shared initial model on the new domain alone
* ``joint``     trains a fresh copy of the shared initial model on the union of seen domains
* ``odil``      adapts BN statistics on K samples, no gradient steps

Train-mode passes refresh BN running statistics for fe and ft as well; that
is standard train-mode behaviour and is recorded in every report.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .adaptation import AdaptationConfig, DomainStatsRegistry, adapt_domain, predict_with_task
from .batchnorm import bn_snapshot
from .data import SCENES, Dataset, Domain, select_adaptation_samples, selection_indices
from .errors import ConfigError, DataError, NumericError
from .metrics import AccuracyMatrix, accuracy, average_accuracy, average_forgetting
from .nn import LRSchedule, Model, OptimizerState, apply_sgd, cosine_lr, softmax_cross_entropy

log = logging.getLogger(__name__)

KINDS = ("base", "fe", "ft", "disjoint", "joint", "odil")
BUDGETS = ("online", "offline")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    base_epochs: int = 120
    offline_epochs: int = 120
    online_epochs: int = 1
    lr_min: float = 0.0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.batch_size < 1 or self.base_epochs < 0 or self.offline_epochs < 1 or self.online_epochs < 1:
            raise ConfigError("batch size and epoch counts must be positive")
        LRSchedule(self.schedule, self.lr, self.lr_min, 1)
        OptimizerState(self.lr, self.momentum)


@dataclass(frozen=True)
class Strategy:
    kind: str
    budget: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("base", "odil"):
            object.__setattr__(self, "budget", None)
        elif self.budget not in BUDGETS:
            raise ConfigError(f"strategy {self.kind} needs a budget in {BUDGETS}")

    @property
    def id(self) -> str:
        return self.kind if self.budget is None else f"{self.kind}-{self.budget}"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        kind, _, budget = text.partition("-")
        return cls(kind, budget or None)

    @property
    def trains(self) -> bool:
        return self.kind in ("fe", "ft", "disjoint", "joint")


ALL_STRATEGIES = (
    Strategy("base"),
    *(Strategy(k, b) for b in BUDGETS for k in ("fe", "ft", "disjoint", "joint")),
    Strategy("odil"),
)


# ---------------------------------------------------------------------------
# training


def _batches(perm: np.ndarray, batch_size: int) -> list[np.ndarray]:
    out = [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
    # a trailing singleton would give 1-D batchnorm a degenerate batch
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def train(model: Model, data: Dataset, epochs: int, hp: TrainConfig, seed, classifier_only=False, visits=None) -> Model:
    """SGD with momentum and a per-epoch cosine schedule restarted for this call."""
    if len(data) == 0:
        raise DataError(f"domain {data.domain_id}: cannot train on an empty dataset")
    if epochs == 0:
        return model
    if data.y.max() >= model.config.num_classes:
        raise DataError("labels exceed the model's class count")
    rng = np.random.default_rng(seed)
    sched = LRSchedule(hp.schedule, hp.lr, hp.lr_min, epochs)
    opt = OptimizerState(hp.lr, hp.momentum)
    stop_at = model.classifier_index if classifier_only else 0
    for epoch in range(epochs):
        opt.lr = cosine_lr(epoch, sched)
        for idx in _batches(rng.permutation(len(data)), hp.batch_size):
            if visits is not None:
                np.add.at(visits, idx, 1)
            logits = model.forward(data.x[idx], "train")
            loss, grad = softmax_cross_entropy(logits, data.y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"loss became {loss} at epoch {epoch}")
            apply_sgd(model, model.backward(grad, stop_at=stop_at), opt)
    return model


def train_base(init: Model, d1_train: Dataset, hp: TrainConfig, seed: int, epochs: int | None = None) -> Model:
    epochs = hp.base_epochs if epochs is None else epochs
    return train(init.copy(), d1_train, epochs, hp, [seed, 0])


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    strategy: str
    seed: int
    domain_ids: list
    matrix: AccuracyMatrix
    avg_accuracy: list[float] = field(default_factory=list)
    forgetting: list[float] = field(default_factory=list)
    config_digest: str = ""
    notes: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict, repr=False)  # (step, domain) -> array

    def recompute(self) -> None:
        steps = range(1, self.matrix.steps + 1)
        self.avg_accuracy = [average_accuracy(self.matrix, t) for t in steps]
        self.forgetting = [average_forgetting(self.matrix, t) for t in steps]

    def current_accuracy(self) -> list[float]:
        return [self.matrix[t, t] for t in range(1, self.matrix.steps + 1)]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "domain_ids": list(self.domain_ids),
            "matrix": self.matrix.to_list(),
            "avg_accuracy": list(self.avg_accuracy),
            "forgetting": list(self.forgetting),
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        m = AccuracyMatrix.from_rows(d["matrix"], d["domain_ids"])
        r = cls(d["strategy"], d["seed"], list(d["domain_ids"]), m, d["avg_accuracy"], d["forgetting"],
                d.get("config_digest", ""), d.get("notes", {}))
        return r


# ---------------------------------------------------------------------------
# experiment


class Experiment:
    """One seed's worth of shared state: the stream, the initial and base models."""

    def __init__(self, domains: list[Domain], init_model: Model, hp: TrainConfig, adaptation: AdaptationConfig,
                 seed: int = 0, exclude_adaptation_samples: bool = False, config_digest: str = "",
                 checkpoint_dir=None, base_model: Model | None = None):
        if not domains:
            raise ConfigError("the domain stream is empty")
        if domains[0].train is None:
            raise DataError("the first domain needs a train split for base training")
        for d in domains:
            idx = [SCENES.index(c) for c in d.spec.classes]
            if max(idx) >= init_model.config.num_classes:
                raise DataError(f"domain {d.domain_id} uses classes outside the model vocabulary")
        self.domains = domains
        self.init_model = init_model
        self.hp = hp
        self.adaptation = adaptation
        self.seed = seed
        self.exclude_adaptation_samples = exclude_adaptation_samples
        self.config_digest = config_digest
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        self._base = base_model

    @property
    def base_model(self) -> Model:
        if self._base is None:
            log.info("training base model on domain %s for %d epochs", self.domains[0].domain_id, self.hp.base_epochs)
            self._base = train_base(self.init_model, self.domains[0].train, self.hp, self.seed)
        return self._base

    # -- helpers ------------------------------------------------------------

    def _adaptation_source(self, domain: Domain) -> tuple[Dataset, bool]:
        if domain.train is not None and not domain.spec.adapt_from_test:
            return domain.train, False
        return domain.test, True

    def adaptation_samples(self, domain: Domain):
        data, _ = self._adaptation_source(domain)
        return select_adaptation_samples(data, domain.spec.adapt_per_class, self.seed, domain.spec.classes)

    def eval_set(self, domain: Domain) -> Dataset:
        """The test split, minus adaptation samples drawn from it when so configured."""
        _, from_test = self._adaptation_source(domain)
        if not (from_test and self.exclude_adaptation_samples):
            return domain.test
        drop = selection_indices(domain.test, domain.spec.adapt_per_class, self.seed, domain.spec.classes)
        keep = np.setdiff1d(np.arange(len(domain.test)), drop)
        return domain.test.subset(keep)

    def _save(self, strategy: Strategy, step: int, model: Model, registry=None, parent: str = "") -> None:
        if self.checkpoint_dir is None:
            return
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        path = self.checkpoint_dir / f"{strategy.id}_seed{self.seed}_step{step}.ckpt.json"
        checkpoint.save_checkpoint(path, model, registry, seed=self.seed, strategy=strategy.id, step=step,
                                   parent=parent, config_digest=self.config_digest)

    def _epochs(self, strategy: Strategy) -> int:
        return self.hp.online_epochs if strategy.budget == "online" else self.hp.offline_epochs

    # -- protocol -----------------------------------------------------------

    def run(self, strategy: Strategy | str) -> EvalReport:
        if isinstance(strategy, str):
            strategy = Strategy.parse(strategy)
        stream = [d for d in self.domains if d.train is not None or not strategy.trains]
        kept = {d.domain_id for d in stream}
        skipped = [d.domain_id for d in self.domains if d.domain_id not in kept]
        base = self.base_model
        model = base.copy()
        registry = DomainStatsRegistry() if strategy.kind == "odil" else None
        if registry is not None:
            registry.add(stream[0].domain_id, bn_snapshot(model))
        eval_sets = {d.domain_id: self.eval_set(d) for d in stream}

        matrix = AccuracyMatrix([d.domain_id for d in stream])
        report = EvalReport(strategy.id, self.seed, matrix.domain_ids, matrix, config_digest=self.config_digest)
        lineage = ["base"]
        visit_log = {}
        for t, domain in enumerate(stream, start=1):
            if t > 1:
                model, parent = self._learn(strategy, t, domain, stream[:t], model, registry, visit_log)
                lineage.append(parent)
            self._save(strategy, t, model, registry, lineage[-1])
            row = []
            for s in stream[:t]:
                test = eval_sets[s.domain_id]
                if registry is not None:
                    preds = predict_with_task(model, registry, s.domain_id, test.x)
                else:
                    preds = model.predict(test.x)
                report.predictions[(t, s.domain_id)] = preds
                row.append(accuracy(preds, test.y))
            matrix.append_row(row)
            log.info("%s step %d (domain %s): %s", strategy.id, t, domain.domain_id, np.round(row, 4).tolist())
        report.recompute()
        report.notes = self._notes(strategy, skipped, lineage, visit_log)
        return report

    def _learn(self, strategy, t, domain, seen, model, registry, visit_log):
        kind = strategy.kind
        seed = [self.seed, KINDS.index(kind) + 1, BUDGETS.index(strategy.budget) if strategy.budget else 0, t]
        if kind == "base":
            return model, f"step{t - 1}"
        if kind == "odil":
            cfg = replace(self.adaptation, schedule=self.adaptation.schedule.with_k(domain.spec.k))
            adapt_domain(model, registry, domain.domain_id, self.adaptation_samples(domain), cfg)
            return model, f"step{t - 1}"
        epochs = self._epochs(strategy)
        if kind in ("fe", "ft"):
            data, parent = domain.train, f"step{t - 1}"
        elif kind == "disjoint":
            model, data, parent = self.init_model.copy(), domain.train, "init"
        else:
            model, parent = self.init_model.copy(), "init"
            data = _union([d.train for d in seen])
        visits = np.zeros(len(data), dtype=np.int64)
        train(model, data, epochs, self.hp, seed, classifier_only=kind == "fe", visits=visits)
        if not (visits == epochs).all():
            raise RuntimeError(f"{strategy.id} step {t}: samples visited {visits.min()}..{visits.max()} times, expected {epochs}")
        visit_log[t] = int(epochs)
        return model, parent

    def _notes(self, strategy, skipped, lineage, visit_log) -> dict:
        notes = {"kind": strategy.kind, "budget": strategy.budget, "lineage": lineage,
                 "skipped_domains": skipped}
        if strategy.kind in ("fe", "ft", "disjoint", "joint"):
            notes["epochs_per_step"] = self._epochs(strategy)
            notes["passes_per_sample"] = {str(k): v for k, v in visit_log.items()}
            notes["bn_running_stats_refreshed_in_train_mode"] = True
        if strategy.kind == "fe":
            notes["trainable"] = "classifier layer only"
        if strategy.kind == "odil":
            a = self.adaptation
            notes.update(selection=a.selection, batch_policy=a.batch_policy,
                         schedule={"alpha0": a.schedule.alpha0, "omega": a.schedule.omega, "delta": a.schedule.delta},
                         k={str(d.domain_id): d.spec.k for d in self.domains[1:]},
                         exclude_adaptation_samples=self.exclude_adaptation_samples)
        return notes


def _union(parts: list[Dataset]) -> Dataset:
    classes = tuple(c for c in SCENES if any(c in p.classes for p in parts))
    return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]), "train",
                   parts[-1].domain_id, classes)
