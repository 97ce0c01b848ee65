"""Streaming adaptation: bounded FIFO memory of recent unlabeled samples.

The target training set arrives as a single shuffled stream. Labeled
feedback items accumulate in an unbounded store at their natural stream
positions; unlabeled items enter a FIFO memory capped at `memory_cap`.
At each checkpoint fraction the model restarts from the pretrained weights
and adapts on the current memory contents plus all feedback seen so far,
so the final checkpoint with a non-binding cap reproduces the offline run.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import adapt as adapt_mod
from . import metrics, nn
from .data import LabeledSet
from .errors import ConfigError
from .feedback import TargetSplit

DEFAULT_CHECKPOINTS = (0.1, 0.4, 0.7, 1.0)


@dataclass
class StreamConfig:
    memory_cap: int
    checkpoints: tuple = DEFAULT_CHECKPOINTS

    def __post_init__(self):
        if self.memory_cap < 1:
            raise ConfigError(f"memory_cap must be >= 1, got {self.memory_cap}")
        self.checkpoints = tuple(float(f) for f in self.checkpoints)
        if not self.checkpoints:
            raise ConfigError("need at least one checkpoint fraction")
        last = 0.0
        for f in self.checkpoints:
            if not last < f <= 1.0:
                raise ConfigError(
                    f"checkpoint fractions must be strictly increasing in (0,1], got {self.checkpoints}"
                )
            last = f


class FifoMemory:
    """Bounded insert-order store of sample indices."""

    def __init__(self, cap: int):
        self.cap = cap
        self.items = []
        self.occupancy_trace = []

    def push(self, idx: int) -> None:
        self.items.append(idx)
        if len(self.items) > self.cap:
            self.items.pop(0)
        assert len(self.items) <= self.cap
        self.occupancy_trace.append(len(self.items))

    def note(self) -> None:
        # labeled items bypass the memory but still mark a stream tick
        self.occupancy_trace.append(len(self.items))

    def __len__(self):
        return len(self.items)


def run_stream(
    model: nn.MlpModel,
    train: LabeledSet,
    split: TargetSplit,
    stream_cfg: StreamConfig,
    adapt_cfg: adapt_mod.AdaptConfig,
    seed: int,
    test_set: LabeledSet = None,
) -> tuple:
    """Stream the target training set; adapt at each checkpoint.

    Returns (checkpoint record list, model from the last checkpoint).
    """
    if adapt_cfg.batch.mu > 0 and stream_cfg.memory_cap < adapt_cfg.batch.mu * adapt_cfg.batch.b:
        raise ConfigError(
            f"memory_cap {stream_cfg.memory_cap} is smaller than one unlabeled "
            f"batch ({adapt_cfg.batch.mu}*{adapt_cfg.batch.b})"
        )
    n = len(train)
    label_of = dict(split.labeled)
    order = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(n)
    triggers = {int(math.ceil(f * n)): f for f in stream_cfg.checkpoints}
    if len(triggers) < len(stream_cfg.checkpoints):
        raise ConfigError(
            f"checkpoint fractions collide at stream length {n}: {stream_cfg.checkpoints}"
        )

    memory = FifoMemory(stream_cfg.memory_cap)
    labeled_store = []
    records = []
    last_model = model.copy()
    for pos, idx in enumerate(order, start=1):
        idx = int(idx)
        if idx in label_of:
            labeled_store.append((idx, label_of[idx]))
            memory.note()
        else:
            memory.push(idx)
        if pos not in triggers:
            continue
        record = {
            "fraction": triggers[pos],
            "items_seen": pos,
            "occupancy": len(memory),
            "labeled_count": len(labeled_store),
        }
        if not labeled_store:
            # no feedback has streamed in yet; evaluate the untouched model
            record["skipped"] = True
            if test_set is not None:
                record["test_acc"] = metrics.top1_accuracy(
                    last_model, test_set.points, test_set.labels
                )
            records.append(record)
            continue
        record["skipped"] = False
        ckpt_split = TargetSplit(list(labeled_store), list(memory.items))
        adapted, rows = adapt_mod.adapt(
            model, ckpt_split, train, adapt_cfg, seed, test_set=test_set
        )
        last_model = adapted
        record["fallbacks"] = int(sum(r["bank"]["fallbacks"] for r in rows))
        if test_set is not None:
            record["test_acc"] = rows[-1]["test_acc"] if rows else metrics.top1_accuracy(
                adapted, test_set.points, test_set.labels
            )
        records.append(record)
    return records, last_model
