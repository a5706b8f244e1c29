import csv
import io
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fssfda.errors import AggregationError
from fssfda.evaluation import (
    PairResult,
    accuracy,
    aggregate,
    format_cell,
    per_class_accuracy,
    render_table,
    result_path,
    write_result,
)


def acc_oracle(p, y):
    return sum(1 for a, b in zip(p, y) if a == b) / len(y)


def pca_oracle(p, y, k):
    per = []
    for c in range(k):
        idx = [i for i in range(len(y)) if y[i] == c]
        per.append(sum(1 for i in idx if p[i] == c) / len(idx))
    return sum(per) / k


def test_accuracy_examples():
    assert accuracy([0, 1, 1, 1], [0, 0, 1, 1]) == 0.75
    assert accuracy([2, 2], [2, 2]) == 1.0
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


def test_per_class_examples():
    assert per_class_accuracy([0, 1, 1, 1], [0, 0, 1, 1], 2) == 0.75
    labels = [0] * 90 + [1] * 10
    assert accuracy([0] * 100, labels) == 0.9
    assert per_class_accuracy([0] * 100, labels, 2) == 0.5
    with pytest.raises(ValueError, match="class 2"):
        per_class_accuracy([0, 1], [0, 1], 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_metrics_match_oracles(k, reps, seed):
    rng = random.Random(seed)
    y = list(range(k)) + [rng.randrange(k) for _ in range(rng.randrange(0, 1000 - k + 1) if reps > 1 else 0)]
    rng.shuffle(y)
    p = [rng.randrange(k) if rng.random() < 0.5 else t for t in y]
    assert accuracy(p, y) == acc_oracle(p, y)
    assert per_class_accuracy(p, y, k) == pytest.approx(pca_oracle(p, y, k), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 20), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_balanced_labels_reduce_to_accuracy(k, m, seed):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(k), m)
    p = rng.integers(0, k, len(y))
    assert per_class_accuracy(p, y, k) == pytest.approx(accuracy(p, y), abs=1e-15)


def _results(values, pairs=("a->b",), method="FT", shots=3):
    out = []
    for pair in pairs:
        s, t = pair.split("->")
        for seed, v in enumerate(values):
            out.append(PairResult(s, t, "clean", method, shots, seed, v, v, 10))
    return out


def test_aggregate_mean_std():
    t = aggregate(_results([1 / 4, 2 / 4, 3 / 4]), [0, 1, 2])
    mean, std = t.cell("FT", 3, "a->b")
    assert mean == pytest.approx(0.5)
    assert std == pytest.approx(0.816497 / 4, abs=1e-6)
    t1 = aggregate(_results([1.0, 1.0, 1.0]), [0, 1, 2])
    assert t1.cell("FT", 3, "Avg") == (1.0, 0.0)
    assert t.meta["std"] == "population"


def test_aggregate_of_one_two_three():
    # metric values must lie in [0, 1]; scale-equivariance gives the {1, 2, 3} case
    t = aggregate(_results([0.1, 0.2, 0.3]), [0, 1, 2])
    mean, std = t.cell("FT", 3, "a->b")
    assert mean * 10 == pytest.approx(2.0, abs=1e-12)
    assert std * 10 == pytest.approx(0.816497, abs=1e-6)


def test_aggregate_six_pairs_seven_columns():
    doms = ["A", "D", "W"]
    pairs = [f"{s}->{t}" for s in doms for t in doms if s != t]
    t = aggregate(_results([0.5, 0.6, 0.7], pairs), [0, 1, 2])
    assert len(t.columns) == 7 and t.columns[-1] == "Avg"


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_aggregate_avg_and_permutation(n_pairs, n_seeds, seed):
    rng = np.random.default_rng(seed)
    pairs = [f"s{i}->t{i}" for i in range(n_pairs)]
    res = []
    for m in ("LP", "FT"):
        for p in pairs:
            s, t = p.split("->")
            for sd in range(n_seeds):
                v = float(rng.uniform())
                res.append(PairResult(s, t, "clean", m, 1, sd, v, v, 5))
    t = aggregate(res, range(n_seeds))
    shuffled = list(res)
    random.Random(seed).shuffle(shuffled)
    assert aggregate(shuffled, range(n_seeds)).cells == t.cells
    for row in t.rows:
        avg = np.mean([t.cells[(row, p)][0] for p in pairs])
        assert abs(t.cells[(row, "Avg")][0] - avg) <= 1e-12


def test_aggregate_missing_and_duplicate():
    res = _results([0.1, 0.2, 0.3])
    with pytest.raises(AggregationError, match="seed 2"):
        aggregate(res[:2], [0, 1, 2])
    with pytest.raises(AggregationError, match="duplicate"):
        aggregate(res + res[:1], [0, 1, 2])


def test_format_cell():
    assert format_cell(0.6445, 0.0094) == "64.45 (0.94)"
    assert format_cell(0.6445, None) == "64.45 (–)"


def test_render_table_formats():
    res = _results([0.64, 0.65, 0.643]) + _results([0.5, 0.5, 0.5], method="LP")
    t = aggregate(res, [0, 1, 2])
    rows = list(csv.reader(io.StringIO(render_table(t, "csv"))))
    assert rows[0] == ["method", "shots", "a->b", "Avg"]
    assert rows[1] == ["FT", "3", "64.43 (0.42)", "64.43 (0.42)"]
    text = render_table(t, "text")
    assert "50.00 (0.00)" in text and text.count("\n") == 4


def test_result_persistence(tmp_path):
    r = _results([0.5])[0]
    path = result_path(tmp_path, "clean", "a", "b", "FT", 3, 0)
    assert path == tmp_path / "clean" / "a__b" / "FT_3shot_seed0.json"
    import json

    write_result(r, path, {"digest": "x"})
    d = json.loads(path.read_text())
    assert PairResult.from_dict(d["result"]) == r and d["digest"] == "x"


def test_pair_result_validation():
    with pytest.raises(ValueError):
        PairResult("a", "b", "clean", "FT", 3, 0, 1.2, 0.5, 10)
    with pytest.raises(ValueError):
        PairResult("a", "b", "clean", "FT", 3, 0, 0.2, 0.5, 0)
