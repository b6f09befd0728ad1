"""Length-bucketed batching with padding masks.

Batches are planned once (length-sorted, greedy fill under a per-modality
budget) and only their order is reshuffled each epoch, so any step's batch
is addressable by index: training can resume mid-stage without replaying an
iterator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CorpusError, Triple, Vocab

TASKS = ("mt", "asr", "st")


class BatchBudgetError(ValueError):
    """An item alone exceeds the batch budget."""


@dataclass
class TextBatch:
    tokens: np.ndarray  # [B, T] int64, pad-filled
    mask: np.ndarray    # [B, T] bool, True = real token


@dataclass
class FrameBatch:
    frames: np.ndarray  # [B, T, frame_dim] float64, zero-filled
    mask: np.ndarray    # [B, T] bool, True = real frame


@dataclass
class TargetBatch:
    dec_in: np.ndarray   # [B, n+1] int64: [lang_tag, y1..yn], pad-filled
    dec_out: np.ndarray  # [B, n+1] int64: [y1..yn, eos], pad-filled
    mask: np.ndarray     # [B, n+1] bool, True where dec_out is real


@dataclass
class TaskBatch:
    """One training batch with every view the task's losses may need."""

    task: str
    size: int
    target: TargetBatch
    src_text: TextBatch | None = None
    tgt_text: TextBatch | None = None
    frames: FrameBatch | None = None


def pack_text(seqs: list[np.ndarray], pad: int) -> TextBatch:
    if not seqs:
        raise CorpusError("empty text batch")
    width = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = True
    return TextBatch(tokens=tokens, mask=mask)


def pack_frames(frame_list: list[np.ndarray]) -> FrameBatch:
    if not frame_list:
        raise CorpusError("empty frame batch")
    width = max(f.shape[0] for f in frame_list)
    dim = frame_list[0].shape[1]
    frames = np.zeros((len(frame_list), width, dim))
    mask = np.zeros((len(frame_list), width), dtype=bool)
    for i, f in enumerate(frame_list):
        frames[i, : f.shape[0]] = f
        mask[i, : f.shape[0]] = True
    return FrameBatch(frames=frames, mask=mask)


def make_target_batch(seqs: list[np.ndarray], lang_tag: int, vocab: Vocab) -> TargetBatch:
    """Teacher-forcing views: decoder reads [tag, y...], predicts [y..., eos]."""
    width = max(len(s) for s in seqs) + 1
    dec_in = np.full((len(seqs), width), vocab.pad, dtype=np.int64)
    dec_out = np.full((len(seqs), width), vocab.pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        dec_in[i, 0] = lang_tag
        dec_in[i, 1 : n + 1] = s
        dec_out[i, :n] = s
        dec_out[i, n] = vocab.eos
        mask[i, : n + 1] = True
    return TargetBatch(dec_in=dec_in, dec_out=dec_out, mask=mask)


def make_task_batch(task: str, triples: list[Triple], vocab: Vocab) -> TaskBatch:
    if task not in TASKS:
        raise CorpusError(f"unknown task {task!r}; expected one of {TASKS}")
    src_ids = [vocab.src_ids(t.src) for t in triples]
    tgt_ids = [vocab.tgt_ids(t.tgt) for t in triples]
    if task == "mt":
        return TaskBatch(
            task=task,
            size=len(triples),
            src_text=pack_text(src_ids, vocab.pad),
            tgt_text=pack_text(tgt_ids, vocab.pad),
            target=make_target_batch(tgt_ids, vocab.tag_tgt, vocab),
        )
    for t in triples:
        if t.frames is None:
            raise CorpusError(f"task {task!r} needs speech frames but the corpus has none")
    frames = pack_frames([t.frames for t in triples])
    if task == "asr":
        return TaskBatch(
            task=task,
            size=len(triples),
            frames=frames,
            src_text=pack_text(src_ids, vocab.pad),
            target=make_target_batch(src_ids, vocab.tag_src, vocab),
        )
    return TaskBatch(  # st
        task=task,
        size=len(triples),
        frames=frames,
        src_text=pack_text(src_ids, vocab.pad),
        target=make_target_batch(tgt_ids, vocab.tag_tgt, vocab),
    )


def item_cost(task: str, triple: Triple) -> int:
    """Budget unit: padded text tokens for MT, frames for speech tasks."""
    if task == "mt":
        return max(len(triple.src), len(triple.tgt)) + 1
    return triple.n_frames


def plan_batches(items: list[Triple], task: str, budget: int) -> list[list[int]]:
    """Length-sorted greedy fill; returns index groups into `items`."""
    costs = [item_cost(task, t) for t in items]
    for i, c in enumerate(costs):
        if c > budget:
            raise BatchBudgetError(
                f"item {i} (cost {c}) exceeds the {task} batch budget {budget}"
            )
    order = sorted(range(len(items)), key=lambda i: (costs[i], i))
    groups: list[list[int]] = []
    cur: list[int] = []
    cur_cost = 0
    for i in order:
        if cur and cur_cost + costs[i] > budget:
            groups.append(cur)
            cur, cur_cost = [], 0
        cur.append(i)
        cur_cost += costs[i]
    if cur:
        groups.append(cur)
    return groups


class TaskBatcher:
    """Pre-materialized batches for one task with seeded per-epoch order."""

    def __init__(self, items: list[Triple], task: str, vocab: Vocab,
                 budget: int, shuffle_seed: int):
        if not items:
            raise CorpusError(f"no items to batch for task {task!r}")
        self.task = task
        self.shuffle_seed = int(shuffle_seed)
        self.groups = plan_batches(items, task, budget)
        self.batches = [make_task_batch(task, [items[i] for i in g], vocab)
                        for g in self.groups]

    def __len__(self) -> int:
        return len(self.batches)

    def epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.shuffle_seed, epoch]))
        return rng.permutation(len(self.batches))

    def batch_for_step(self, step: int) -> TaskBatch:
        """Deterministic batch for a 0-based global step index."""
        epoch, pos = divmod(step, len(self.batches))
        return self.batches[self.epoch_order(epoch)[pos]]

    def epoch(self, epoch: int) -> list[TaskBatch]:
        return [self.batches[i] for i in self.epoch_order(epoch)]


def batch_iterator(items: list[Triple], task: str, vocab: Vocab, budget: int,
                   shuffle_seed: int, epochs: int = 1):
    """Yield task batches for `epochs` passes over the corpus."""
    batcher = TaskBatcher(items, task, vocab, budget, shuffle_seed)
    for e in range(epochs):
        yield from batcher.epoch(e)
