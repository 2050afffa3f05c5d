"""Event-log IO, per-user histories, leave-one-out splits and training batches."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from crmlab.errors import DataError
from crmlab.simulator import InteractionEvent

log = logging.getLogger(__name__)

HEADER = "user_id\titem_id\twatch_time\tstep"
PAD_ID = 0


def write_events(path, events):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(HEADER + "\n")
        for e in events:
            # repr round-trips floats exactly
            fh.write(f"{e.user_id}\t{e.item_id}\t{e.watch_time!r}\t{e.step}\n")


def load_events(path, n_users: int | None = None, n_items: int | None = None) -> list[InteractionEvent]:
    """Parse a TSV event log; result is sorted by (user_id, step).

    ``n_users`` / ``n_items`` declare the vocabulary: user ids must lie in
    ``[0, n_users)`` and item ids in ``[1, n_items]``.
    """
    events = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != HEADER:
            raise DataError(f"{path}:1: expected header {HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            try:
                user, item, watch, step = int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(watch) or watch < 0:
                raise DataError(f"{path}:{lineno}: watch_time must be finite and >= 0")
            if user < 0 or (n_users is not None and user >= n_users):
                raise DataError(f"{path}:{lineno}: user id {user} outside [0, {n_users})")
            if item <= PAD_ID or (n_items is not None and item > n_items):
                raise DataError(f"{path}:{lineno}: item id {item} outside [1, {n_items}]")
            events.append(InteractionEvent(user, item, watch, step))
    events.sort(key=lambda e: (e.user_id, e.step))
    return events


@dataclass(frozen=True)
class UserHistory:
    user_id: int
    events: tuple[InteractionEvent, ...]

    def __len__(self):
        return len(self.events)

    @property
    def item_ids(self):
        return [e.item_id for e in self.events]

    @property
    def watch_times(self):
        return [e.watch_time for e in self.events]


def group_histories(events) -> list[UserHistory]:
    by_user: dict[int, list] = {}
    for e in events:
        by_user.setdefault(e.user_id, []).append(e)
    out = []
    for uid in sorted(by_user):
        evs = sorted(by_user[uid], key=lambda e: e.step)
        out.append(UserHistory(uid, tuple(evs)))
    return out


@dataclass(frozen=True)
class TrainExample:
    user_id: int
    item_ids: tuple[int, ...]  # x_1..x_n, oldest first, at most max_seq_len long
    watch_times: tuple[float, ...]  # w_1..w_n
    target_item: int  # x_{n+1}
    target_watch: float  # w_{n+1}
    target_step: int


def _example(h: UserHistory, t: int, max_seq_len: int) -> TrainExample:
    prefix = h.events[max(0, t - max_seq_len):t]
    tgt = h.events[t]
    return TrainExample(
        h.user_id,
        tuple(e.item_id for e in prefix),
        tuple(e.watch_time for e in prefix),
        tgt.item_id,
        tgt.watch_time,
        tgt.step,
    )


def split_leave_one_out(histories, max_seq_len: int = 32):
    """Hold out each user's last event; every earlier event with a non-empty
    prefix becomes one training example (prefix truncated to the trailing
    ``max_seq_len`` events).

    Users with fewer than 3 events are skipped and counted in a warning.
    """
    train, test = [], []
    skipped = 0
    for h in histories:
        n = len(h)
        if n < 3:
            skipped += 1
            continue
        for t in range(1, n - 1):
            train.append(_example(h, t, max_seq_len))
        test.append(_example(h, n - 1, max_seq_len))
    if skipped:
        log.warning("split_leave_one_out: skipped %d user(s) with fewer than 3 events", skipped)
    return train, test


@dataclass(eq=False)
class Batch:
    user_ids: np.ndarray  # (B,) int64
    item_ids: np.ndarray  # (B, L) int64, left-padded with PAD_ID
    watch_times: np.ndarray  # (B, L) float32, 0 at padding
    lengths: np.ndarray  # (B,) int64 true prefix lengths
    targets: np.ndarray  # (B,) int64
    target_watch: np.ndarray  # (B,) float32

    def __len__(self):
        return len(self.targets)


def collate(examples, max_seq_len: int) -> Batch:
    b = len(examples)
    ids = np.full((b, max_seq_len), PAD_ID, dtype=np.int64)
    watch = np.zeros((b, max_seq_len), dtype=np.float32)
    lengths = np.zeros(b, dtype=np.int64)
    for r, ex in enumerate(examples):
        n = min(len(ex.item_ids), max_seq_len)
        if n:
            ids[r, max_seq_len - n:] = ex.item_ids[-n:]
            watch[r, max_seq_len - n:] = ex.watch_times[-n:]
        lengths[r] = n
    return Batch(
        np.array([ex.user_id for ex in examples], dtype=np.int64),
        ids,
        watch,
        lengths,
        np.array([ex.target_item for ex in examples], dtype=np.int64),
        np.array([ex.target_watch for ex in examples], dtype=np.float32),
    )


def make_batches(examples, batch_size: int, seed: int, max_seq_len: int = 32, max_retries: int = 4) -> list[Batch]:
    """One shuffled epoch of batches whose target items are pairwise distinct.

    Examples whose target collides with one already in the batch are deferred
    to the next batch. Each batch scans at most ``max_retries * batch_size``
    examples; when it cannot fill up it is emitted short. Batches of a single
    example are dropped since in-batch negatives need two rows.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 for in-batch negatives")
    order = np.random.default_rng(seed).permutation(len(examples))
    pending = deque(examples[i] for i in order)
    batches = []
    dropped = 0
    while pending:
        chosen, seen, deferred = [], set(), []
        scans = 0
        while pending and len(chosen) < batch_size and scans < max_retries * batch_size:
            ex = pending.popleft()
            scans += 1
            if ex.target_item in seen:
                deferred.append(ex)
            else:
                seen.add(ex.target_item)
                chosen.append(ex)
        pending.extendleft(reversed(deferred))
        if len(chosen) >= 2:
            batches.append(collate(chosen, max_seq_len))
        else:
            dropped += len(chosen)
    if dropped:
        log.debug("make_batches: dropped %d example(s) that could not be paired", dropped)
    return batches

