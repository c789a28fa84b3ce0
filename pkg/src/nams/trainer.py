"""Training loop: receiver minibatches, cosine-annealed Adam, median-energy pruning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import RirCorpus
from .losses import TERMS, LossWeights, total_loss
from .model import ModelConfig, NamsModel, init_dense, init_sparse
from .persistence import Checkpoint
from .renderer import SPEED_OF_SOUND


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or gradient; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: Checkpoint | None, epoch: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 300
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    batch_size: int = 16
    prune_start: int = 100
    prune_interval: int = 20
    prune_threshold: float = 0.5
    sh_order: int = 3
    init: str = "dense"
    pruning: bool = True
    seed: int = 0
    speed_of_sound: float = SPEED_OF_SOUND
    weights: dict = field(default_factory=lambda: LossWeights().as_dict())

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.prune_threshold < 1:
            raise ValueError("prune_threshold must lie in (0, 1)")
        if not 0 <= self.sh_order <= 3:
            raise ValueError("sh_order must be in 0..3")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prune_interval < 1:
            raise ValueError("prune_interval must be >= 1")
        parse_init(self.init)
        LossWeights(**self.weights)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    def as_dict(self) -> dict:
        return asdict(self)


def parse_init(spec: str):
    """'dense' -> ('dense', None); 'sparse:8' -> ('sparse', 8)."""
    if spec == "dense":
        return "dense", None
    kind, _, count = spec.partition(":")
    if kind == "sparse" and count.isdigit() and int(count) >= 1:
        return "sparse", int(count)
    raise ValueError(f"init must be 'dense' or 'sparse:N', got {spec!r}")


@dataclass
class PruneEvent:
    epoch: int
    energies: np.ndarray
    removed: np.ndarray
    count_before: int
    count_after: int
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "energies": [float(e) for e in self.energies],
            "removed": [int(i) for i in self.removed],
            "count_before": self.count_before,
            "count_after": self.count_after,
            "note": self.note,
        }


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    terms: dict
    train_loss: float
    test_loss: float
    poles: int

    def tsv(self) -> str:
        cols = [str(self.epoch), repr(self.lr)]
        cols += [repr(self.terms[k]) for k in TERMS]
        cols += [repr(self.train_loss), repr(self.test_loss), str(self.poles)]
        return "\t".join(cols)


LOG_HEADER = "\t".join(["epoch", "lr", *TERMS, "train_total", "test_loss", "poles"])


@dataclass
class TrainResult:
    best: Checkpoint
    model: NamsModel
    history: list
    prune_events: list


def is_prune_epoch(epoch: int, config: TrainConfig) -> bool:
    return (
        config.pruning
        and epoch >= config.prune_start
        and (epoch - config.prune_start) % config.prune_interval == 0
    )


def prune_schedule(config: TrainConfig) -> list:
    return [e for e in range(config.epochs) if is_prune_epoch(e, config)]


def pole_energies(model: NamsModel) -> np.ndarray:
    return model.pole_energies()


def prune_mask(energies, threshold: float = 0.5):
    """Boolean removal mask for the median rule, plus an anomaly note.

    Never removes every pole; if the rule would, the most energetic pole is kept.
    """
    e = np.asarray(energies, dtype=np.float64)
    if len(e) < 2:
        raise ValueError("pruning needs at least two alive poles")
    remove = e < threshold * np.median(e)
    note = ""
    if remove.all():
        remove[int(np.argmax(e))] = False
        note = "rule would remove every pole; kept the most energetic one"
    return remove, note


def prune_step(model: NamsModel, epoch: int, threshold: float = 0.5, energies=None) -> PruneEvent:
    if energies is None:
        energies = pole_energies(model)
    remove, note = prune_mask(energies, threshold)
    before = model.poles.count
    removed = model.remove_poles(np.flatnonzero(remove))
    if 0 in removed.tolist():
        note = (note + "; " if note else "") + "source-position pole removed"
    return PruneEvent(epoch, np.asarray(energies, float).copy(), removed, before, model.poles.count, note)


def build_model(config: TrainConfig, corpus: RirCorpus, rng: np.random.Generator) -> NamsModel:
    kind, per_sphere = parse_init(config.init)
    source = np.asarray(corpus.source, dtype=np.float64)
    positions = init_dense(source, rng) if kind == "dense" else init_sparse(source, per_sphere, rng)
    center, scale = corpus.bounds()
    mc = ModelConfig(
        sh_order=config.sh_order,
        center=tuple(float(v) for v in center),
        scale=float(scale),
        speed_of_sound=config.speed_of_sound,
    )
    return NamsModel.create(positions, source, mc, rng)


def evaluate_loss(model: NamsModel, corpus: RirCorpus, weights: LossWeights | None = None) -> float:
    """Mean total loss over a corpus, rendered without a tape."""
    weights = weights or LossWeights()
    signals = model.signal_head()
    vals = [
        total_loss(model.render(r, signals), h, weights).value
        for r, h in zip(corpus.receivers, corpus.rirs)
    ]
    return float(np.mean(vals))


def accumulate_gradients(model: NamsModel, receivers, targets, weights: LossWeights) -> dict:
    """Gradients of the mean loss over a receiver minibatch, left in the parameters.

    The signal branch runs once per batch; each receiver then gets its own
    tape, so only one receiver's graph is alive at a time.  Returns the
    summed per-receiver loss terms.
    """
    count = len(receivers)
    sums = dict.fromkeys(TERMS, 0.0)
    sums["total"] = 0.0
    with ad.Tape() as signal_tape:
        signals = model.signal_head()
    for receiver, target in zip(receivers, targets):
        with ad.Tape() as tape:
            report = total_loss(model.render(receiver, signals), target, weights)
            scaled = report.total * (1.0 / count)
        value = report.value
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value}")
        tape.backward(scaled)
        for k in TERMS:
            sums[k] += float(ad.value_of(report.terms[k]))
        sums["total"] += value
    grad = signals.grad
    signals.grad = None
    if grad is not None:
        signal_tape.backward(signals, grad=grad)
    return sums


def train_batch(model: NamsModel, receivers, targets, lr: float, weights: LossWeights) -> dict:
    """One Adam step on the mean loss over a receiver minibatch."""
    sums = accumulate_gradients(model, receivers, targets, weights)
    ad.adam_step(model.store, lr)
    return sums


def _snapshot(model, config, events, epoch, test_loss) -> Checkpoint:
    return Checkpoint.from_model(
        model,
        train_config=config.as_dict(),
        prune_events=[e.as_dict() for e in events],
        best_epoch=epoch,
        best_test_loss=test_loss,
    )


def train(
    config: TrainConfig,
    train_set: RirCorpus,
    test_set: RirCorpus,
    log=None,
    on_epoch=None,
) -> TrainResult:
    """Fit a model; returns the checkpoint with the lowest test loss.

    ``log`` receives one tab-separated line per epoch (header first).
    ``on_epoch(record, model)`` is called after each epoch.
    """
    rng = np.random.default_rng(config.seed)
    model = build_model(config, train_set, rng)
    weights = config.loss_weights
    events: list = []
    history: list = []
    best: Checkpoint | None = None
    if log is not None:
        log(LOG_HEADER)
    n = len(train_set)
    for epoch in range(config.epochs):
        if is_prune_epoch(epoch, config) and model.poles.count >= 2:
            events.append(prune_step(model, epoch, config.prune_threshold))
        lr = ad.cosine_lr(epoch, config.lr_max, config.lr_min, config.epochs)
        order = rng.permutation(n)
        sums = dict.fromkeys(TERMS, 0.0)
        sums["total"] = 0.0
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = train_batch(model, train_set.receivers[idx], train_set.rirs[idx], lr, weights)
                for k in sums:
                    sums[k] += batch[k]
            test_loss = evaluate_loss(model, test_set, weights)
            if not math.isfinite(test_loss):
                raise FloatingPointError(f"non-finite test loss {test_loss}")
        except FloatingPointError as exc:
            raise TrainingAborted(f"epoch {epoch}: {exc}", best, epoch) from exc
        record = EpochRecord(
            epoch, lr, {k: sums[k] / n for k in TERMS}, sums["total"] / n, test_loss, model.poles.count
        )
        history.append(record)
        if best is None or test_loss < best.best_test_loss:
            best = _snapshot(model, config, events, epoch, test_loss)
        if log is not None:
            log(record.tsv())
        if on_epoch is not None:
            on_epoch(record, model)
    best.meta["final_test_loss"] = history[-1].test_loss
    best.meta["final_poles"] = model.poles.count
    return TrainResult(best, model, history, events)

