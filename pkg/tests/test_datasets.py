import logging
import random

import numpy as np
import pytest

from crmlab.datasets import (
    HEADER,
    PAD_ID,
    TrainExample,
    collate,
    group_histories,
    load_events,
    make_batches,
    split_leave_one_out,
    write_events,
)
from crmlab.errors import DataError
from crmlab.simulator import InteractionEvent, SessionConfig, WorldConfig, build_world, generate_sessions


@pytest.fixture(scope="module")
def events():
    world = build_world(WorldConfig(n_users=40, n_items=150, seed=2))
    return generate_sessions(world, SessionConfig(sessions_per_user=2, session_len=8, seed=2))


def test_empty_body_loads_empty(tmp_path):
    path = tmp_path / "e.tsv"
    path.write_text(HEADER + "\n")
    assert load_events(path) == []


def test_round_trip_is_identity(tmp_path, events):
    path = tmp_path / "e.tsv"
    write_events(path, events)
    assert load_events(path) == events


def test_shuffled_file_groups_the_same(tmp_path, events):
    path = tmp_path / "e.tsv"
    write_events(path, events)
    lines = path.read_text().splitlines()
    body = lines[1:]
    random.Random(0).shuffle(body)
    shuffled = tmp_path / "s.tsv"
    shuffled.write_text("\n".join([lines[0], *body]) + "\n")
    assert group_histories(load_events(shuffled)) == group_histories(sorted(events, key=lambda e: (e.user_id, e.step)))


@pytest.mark.parametrize("row, fragment", [
    ("1\t2\tabc\t0", r"\.tsv:2:"),
    ("1\t2\t3.0", r"\.tsv:2:"),
    ("1\t0\t3.0\t0", r"\.tsv:2:"),
    ("1\t2\t-1\t0", r"\.tsv:2:"),
])
def test_malformed_rows_name_the_line(tmp_path, row, fragment):
    path = tmp_path / "bad.tsv"
    path.write_text(f"{HEADER}\n{row}\n")
    with pytest.raises(DataError, match=fragment):
        load_events(path)


def test_vocab_bounds_enforced(tmp_path):
    path = tmp_path / "e.tsv"
    path.write_text(f"{HEADER}\n0\t11\t1.0\t0\n")
    with pytest.raises(DataError, match=r"\.tsv:2: item id 11"):
        load_events(path, n_items=10)


def _history(n, uid=0):
    return group_histories([InteractionEvent(uid, i + 1, float(i), i) for i in range(n)])


def test_length_three_history():
    train, test = split_leave_one_out(_history(3))
    assert len(test) == 1 and len(train) >= 1
    assert test[0].target_item == 3 and test[0].item_ids == (1, 2)


def test_short_histories_skipped_with_warning(caplog):
    hs = _history(2, uid=0) + _history(5, uid=1)
    with caplog.at_level(logging.WARNING):
        train, test = split_leave_one_out(hs)
    assert [ex.user_id for ex in test] == [1]
    assert "skipped 1 user" in caplog.text


def test_counting_formula(events):
    hs = group_histories(events)
    train, test = split_leave_one_out(hs, max_seq_len=5)
    # one example per event with a non-empty prefix, minus the held-out last one
    assert len(train) == sum(max(0, len(h) - 2) for h in hs)
    assert len(test) == len(hs)
    assert all(1 <= len(ex.item_ids) <= 5 for ex in train + test)


def test_test_targets_never_train_targets(events):
    train, test = split_leave_one_out(group_histories(events))
    held = {(ex.user_id, ex.target_step) for ex in test}
    assert held.isdisjoint({(ex.user_id, ex.target_step) for ex in train})
    last = {ex.user_id: ex.target_step for ex in test}
    assert all(ex.target_step < last[ex.user_id] for ex in train)


def test_prefix_immediately_precedes_target(events):
    hs = {h.user_id: h for h in group_histories(events)}
    train, _ = split_leave_one_out(list(hs.values()), max_seq_len=4)
    for ex in train[:50]:
        evs = hs[ex.user_id].events
        t = [e.step for e in evs].index(ex.target_step)
        assert ex.item_ids == tuple(e.item_id for e in evs[max(0, t - 4):t])


def test_left_padding():
    a = TrainExample(0, (5, 6), (1.0, 2.0), 9, 3.0, 2)
    b = TrainExample(1, (1, 2, 3, 4), (1.0, 2.0, 3.0, 4.0), 8, 3.0, 4)
    batch = collate([a, b], 4)
    np.testing.assert_array_equal(batch.item_ids[0], [PAD_ID, PAD_ID, 5, 6])
    np.testing.assert_array_equal(batch.watch_times[0], [0, 0, 1, 2])
    np.testing.assert_array_equal(batch.lengths, [2, 4])


def test_batches_deterministic(events):
    train, _ = split_leave_one_out(group_histories(events))
    a = make_batches(train, 16, seed=5)
    b = make_batches(train, 16, seed=5)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.item_ids.tobytes() == y.item_ids.tobytes()
        assert x.targets.tobytes() == y.targets.tobytes()


def test_distinct_targets_across_many_batches():
    # a tiny vocabulary forces frequent collisions
    rng = np.random.default_rng(0)
    examples = [TrainExample(i % 30, (1,), (1.0,), int(rng.integers(1, 40)), 1.0, i) for i in range(4000)]
    seen = 0
    seed = 0
    while seen < 1000:
        for batch in make_batches(examples, 32, seed=seed):
            assert len(set(batch.targets.tolist())) == len(batch.targets)
            assert len(batch.targets) >= 2
            seen += 1
        seed += 1


def test_no_example_duplicated_within_epoch():
    # user_id doubles as a unique example tag here
    targets = [2, 2, 2, 3, 4, 5, 6, 7, 2, 3]
    examples = [TrainExample(i, (1,), (1.0,), t, 1.0, i) for i, t in enumerate(targets)]
    tags = [int(u) for b in make_batches(examples, 4, seed=1) for u in b.user_ids]
    assert len(tags) == len(set(tags))


def test_batch_size_must_allow_negatives():
    with pytest.raises(ValueError):
        make_batches([], 1, seed=0)
