"""Adam optimisation, early stopping, grid search and cross-validation."""
from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .batching import PaddedBatch, pad_batch
from .corpus import AnnotatedSentence, FoldSplit, kfold_split, select
from .evaluation import MetricsReport, aggregate_folds, evaluate
from .model import HermitConfig, HermitModel, build, decode_all
from .numerics import Parameter

__all__ = ["PaddedBatch", "pad_batch", "TrainConfig", "OptimizerState", "adam_step",
           "fit", "grid_search", "run_crossval"]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    clip_norm: float | None = None
    seed: int = 0
    dev_metric: str = "combined.f1"
    # stop as soon as the dev metric reaches this value
    target: float | None = None
    # "fold": tune on the next fold; "holdout": tune on 10% of the training folds
    tuning: str = "fold"
    holdout_fraction: float = 0.1

    def __post_init__(self):
        for name in ("lr", "eps", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")
        if self.tuning not in ("fold", "holdout"):
            raise ValueError(f"unknown tuning mode {self.tuning!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Sequence[Parameter], state: OptimizerState, config: TrainConfig,
              grads: Mapping[str, np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place. Gradients default to ``p.grad``."""
    grads = grads if grads is not None else {p.name: p.grad for p in params}
    for p in params:
        g = grads[p.name]
        if g.shape != p.shape:
            raise ValueError(f"{p.name}: gradient {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = grads[p.name]
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def make_batches(corpus: Sequence[AnnotatedSentence], batch_size: int,
                 rng: np.random.Generator) -> list[list[AnnotatedSentence]]:
    """Shuffle, sort by length so batches pad little, then shuffle batch order."""
    order = rng.permutation(len(corpus))
    order = sorted(order, key=lambda i: len(corpus[i]))
    batches = [[corpus[i] for i in order[j:j + batch_size]]
               for j in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def train_epoch(model: HermitModel, corpus: Sequence[AnnotatedSentence], config: TrainConfig,
                state: OptimizerState, rng: np.random.Generator) -> float:
    """One pass over ``corpus``; returns the mean per-sentence loss."""
    params = model.parameters()
    total = 0.0
    for sentences in make_batches(corpus, config.batch_size, rng):
        batch = model.batch(sentences)
        model.zero_grad()
        with nx.Tape() as tape:
            loss = model.loss(batch, rng if model.config.dropout else None)
            tape.backward(loss)
        tape.clear()
        if config.clip_norm is not None:
            clip_gradients(params, config.clip_norm)
        adam_step(params, state, config)
        total += loss.item()
    return total / len(corpus)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_metric: float


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_metric: float
    history: list[EpochRecord]

    @property
    def losses(self) -> list[float]:
        return [h.train_loss for h in self.history]


Scorer = Callable[[HermitModel, Sequence[AnnotatedSentence]], float]


def dev_scorer(metric: str) -> Scorer:
    def score(model, dev):
        report = evaluate(dev, decode_all(model, dev))
        return report.metrics()[metric]
    return score


def fit(model: HermitModel, train: Sequence[AnnotatedSentence],
        dev: Sequence[AnnotatedSentence], config: TrainConfig,
        scorer: Scorer | None = None, history_path=None) -> FitResult:
    """Train with early stopping on the dev metric; the model ends at its best state."""
    if not train or not dev:
        raise ValueError("fit needs non-empty train and dev corpora")
    scorer = scorer or dev_scorer(config.dev_metric)
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    history: list[EpochRecord] = []
    best_state, best_epoch, best_metric = model.state(), 0, -math.inf
    stale = 0
    sink = open(history_path, "w", encoding="utf-8") if history_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            loss = train_epoch(model, train, config, state, rng)
            metric = float(scorer(model, dev))
            history.append(EpochRecord(epoch, loss, metric))
            if sink:
                sink.write(json.dumps(asdict(history[-1])) + "\n")
                sink.flush()
            log.info("epoch %d loss %.4f dev %.4f", epoch, loss, metric)
            if metric > best_metric:
                best_state, best_epoch, best_metric = model.state(), epoch, metric
                stale = 0
            else:
                stale += 1
            if config.target is not None and metric >= config.target:
                break
            if stale >= config.patience:
                break
    finally:
        if sink:
            sink.close()
    model.load_state(best_state)
    return FitResult(best_state, best_epoch, best_metric, history)


# ---------------------------------------------------------------- grid search

@dataclass
class GridTrial:
    point: dict
    metric: float
    epoch: int


@dataclass
class GridResult:
    model_config: HermitConfig
    train_config: TrainConfig
    point: dict
    trials: list[GridTrial]


def _apply(point: Mapping, model_cfg: HermitConfig, train_cfg: TrainConfig):
    mkeys = {f.name for f in fields(HermitConfig)}
    tkeys = {f.name for f in fields(TrainConfig)}
    unknown = set(point) - mkeys - tkeys
    if unknown:
        raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
    return (replace(model_cfg, **{k: v for k, v in point.items() if k in mkeys}),
            replace(train_cfg, **{k: v for k, v in point.items() if k in tkeys}))


def grid_search(space: Mapping[str, Sequence], train: Sequence[AnnotatedSentence],
                dev: Sequence[AnnotatedSentence], model_config: HermitConfig,
                train_config: TrainConfig, fit_fn=fit, seed: int = 0) -> GridResult:
    """Fit every point of the Cartesian product; first best point wins ties."""
    if not space or any(len(v) == 0 for v in space.values()):
        raise ValueError("every hyperparameter needs at least one value")
    keys = list(space)
    trials = []
    best = None
    for values in itertools.product(*(space[k] for k in keys)):
        point = dict(zip(keys, values))
        mcfg, tcfg = _apply(point, model_config, train_config)
        result = fit_fn(build(mcfg, seed), train, dev, tcfg)
        trials.append(GridTrial(point, result.best_metric, result.best_epoch))
        if best is None or result.best_metric > best[0]:
            best = (result.best_metric, point, mcfg, tcfg)
    _, point, mcfg, tcfg = best
    return GridResult(mcfg, tcfg, point, trials)


# ----------------------------------------------------------- cross-validation

@dataclass
class FoldOutcome:
    fold: int
    report: MetricsReport
    best_epoch: int
    losses: list[float]


@dataclass
class CrossvalResult:
    folds: list[FoldOutcome]
    split: FoldSplit

    @property
    def reports(self) -> list[MetricsReport]:
        return [f.report for f in self.folds]

    def aggregate(self) -> dict[str, tuple[float, float]]:
        return aggregate_folds(self.reports)


def fold_corpora(corpus: Sequence[AnnotatedSentence], split: FoldSplit, r: int,
                 config: TrainConfig):
    """(train, dev, test) sentence lists for round ``r``."""
    test = select(corpus, split.test_fold(r))
    # with k = 2 the tuning fold would leave nothing to train on
    if config.tuning == "fold" and split.k > 2:
        return select(corpus, split.train_ids(r)), select(corpus, split.tuning_fold(r)), test
    test_ids = set(split.test_fold(r))
    rest = [s for s in corpus if s.id not in test_ids]
    order = np.random.default_rng(config.seed + r).permutation(len(rest))
    n_dev = max(1, int(round(config.holdout_fraction * len(rest))))
    dev = [rest[i] for i in sorted(order[:n_dev])]
    train = [rest[i] for i in sorted(order[n_dev:])]
    return train, dev, test


def _fold_config(model_config: HermitConfig, train: Sequence[AnnotatedSentence]) -> HermitConfig:
    if model_config.embedding_mode != "trainable-lookup":
        return model_config
    norm = (lambda w: w.lower()) if model_config.lowercase else (lambda w: w)
    return replace(model_config,
                   embedding_words=sorted({norm(w) for s in train for w in s.tokens}))


def run_fold(corpus, split, r, model_config, train_config, provider=None) -> FoldOutcome:
    train, dev, test = fold_corpora(corpus, split, r, train_config)
    cfg = _fold_config(model_config, train)
    model = build(cfg, train_config.seed + r, provider)
    result = fit(model, train, dev, replace(train_config, seed=train_config.seed + r))
    report = evaluate(test, decode_all(model, test))
    return FoldOutcome(r, report, result.best_epoch, result.losses)


def _run_fold_job(args):
    return run_fold(*args)


def run_crossval(corpus: Sequence[AnnotatedSentence], k: int, model_config: HermitConfig,
                 train_config: TrainConfig, ablation: str | None = None, jobs: int = 1,
                 provider=None, rounds: Iterable[int] | None = None) -> CrossvalResult:
    """k train/evaluate rounds; fold r tests, fold r+1 tunes (or a 10% holdout)."""
    if ablation is not None:
        model_config = model_config.with_ablation(ablation)
    split = kfold_split(corpus, k, train_config.seed)
    rounds = list(range(k) if rounds is None else rounds)
    args = [(list(corpus), split, r, model_config, train_config, provider) for r in rounds]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_fold_job, args))
    else:
        outcomes = [_run_fold_job(a) for a in args]
    return CrossvalResult(outcomes, split)
