import numpy as np
import pytest

from petlab import tasks
from petlab.tensor import ContractError, Rng


def test_vocab_is_stable_and_covers_generators():
    assert tasks.VOCAB["<pad>"] == 0
    assert tasks.VOCAB["<bos>"] == 1
    assert tasks.VOCAB["<eos>"] == 2
    ids = set(tasks.VOCAB.values())
    assert len(ids) == len(tasks.VOCAB)
    assert max(ids) < 64  # fits the toy default vocab size


@pytest.mark.parametrize("name", ["lookup", "match", "copy", "caption"])
def test_examples_are_well_formed(name):
    spec = tasks.task_spec(name)
    rng = Rng(3)
    for _ in range(20):
        ex = tasks.sample_example(spec, rng, 9)
        assert ex.grid.shape == (3, 3)
        assert len(ex.input_ids) > 0
        assert len(ex.target_ids) > 0
        assert all(0 <= t < 64 for t in ex.input_ids + ex.target_ids)


def test_unknown_task_rejected():
    with pytest.raises(ContractError):
        tasks.task_spec("sudoku")


def test_non_square_grid_rejected():
    with pytest.raises(ContractError):
        tasks.sample_example(tasks.task_spec("copy"), Rng(0), 7)


def test_heldout_set_is_deterministic():
    spec = tasks.task_spec("lookup")
    a = tasks.heldout_set(spec, 5, 8, 9)
    b = tasks.heldout_set(spec, 5, 8, 9)
    assert all(x.input_ids == y.input_ids and x.target_ids == y.target_ids
               for x, y in zip(a, b))


def test_heldout_differs_from_train_stream():
    spec = tasks.task_spec("lookup")
    held = tasks.heldout_set(spec, 5, 8, 9)
    train_rng = tasks.train_stream_rng(spec, 5)
    train = [tasks.sample_example(spec, train_rng, 9) for _ in range(8)]
    assert any(x.input_ids != y.input_ids for x, y in zip(held, train))


def test_feature_table_is_fixed_across_processes():
    a = tasks.symbol_features(16)
    b = tasks.symbol_features(16)
    assert np.array_equal(a, b)
    assert a.shape == (tasks.N_SYMBOLS, 16)


def test_grid_features_map_symbols():
    table = tasks.symbol_features(8)
    grid = np.array([[0, 1], [2, 0]])
    feats = tasks.grid_features(grid, table)
    assert feats.shape == (4, 8)
    assert np.array_equal(feats[0], feats[3])


def test_match_task_emits_truth_values():
    spec = tasks.task_spec("match")
    rng = Rng(11)
    answers = set()
    for _ in range(50):
        ex = tasks.sample_example(spec, rng, 9)
        answers.add(tasks.ID_TO_TOKEN[ex.target_ids[0]])
    assert answers == {"true", "false"}
