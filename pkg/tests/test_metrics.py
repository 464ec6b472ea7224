import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmtl.metrics import (MetricsReport, StageResult, TaskResult, accuracy, confusion, emit_report,
                            format_table, load_report, summary_rows, weighted_average_accuracy)


def test_accuracy_counting_oracle(rng):
    p, y = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    assert accuracy(p, y) == sum(int(a == b) for a, b in zip(p, y)) / 50
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])


def test_weighted_hand_and_mean():
    assert weighted_average_accuracy([(1.0, 1), (0.5, 3)]) == pytest.approx(0.625, abs=1e-15)
    accs = [0.2, 0.7, 0.9]
    assert weighted_average_accuracy([(a, 4) for a in accs]) == pytest.approx(np.mean(accs), abs=1e-15)
    with pytest.raises(ValueError):
        weighted_average_accuracy([])
    with pytest.raises(ValueError):
        weighted_average_accuracy([(0.5, 0)])


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 1000)), min_size=1, max_size=10),
       st.integers(1, 50))
def test_weighted_scale_invariant(entries, c):
    a = weighted_average_accuracy(entries)
    b = weighted_average_accuracy([(acc, c * n) for acc, n in entries])
    assert a == pytest.approx(b, abs=1e-12)
    assert min(e[0] for e in entries) - 1e-12 <= a <= max(e[0] for e in entries) + 1e-12


def test_confusion_counting_oracle(rng):
    C = 4
    p, y = rng.integers(0, C, 80), rng.integers(0, C, 80)
    cm = confusion(p, y, C, "activity")
    for i in range(C):
        for j in range(C):
            assert cm.counts[i, j] == sum(1 for a, b in zip(y, p) if a == i and b == j)
    assert np.array_equal(cm.counts.sum(1), np.bincount(y, minlength=C))
    assert cm.accuracy == pytest.approx(accuracy(p, y), abs=1e-15)
    with pytest.raises(ValueError):
        confusion([4], [0], C)


def _report():
    s1 = StageResult("Common", {
        "a": {"activity": TaskResult(0.5, 10, [[5, 5], [0, 0]])},
        "b": {"activity": TaskResult(1.0, 30, [[30, 0], [0, 0]]),
              "position": TaskResult(0.25, 4, [[1, 3], [0, 0]])},
    })
    s2 = StageResult("Personalize", {"a": {"activity": TaskResult(0.9, 10, [[9, 1], [0, 0]])}})
    return MetricsReport("layered_transfer", [s1, s2], {"seed": 7})


def test_stage_weighted_and_all():
    s = _report().stages[0]
    assert s.weighted("activity") == (pytest.approx((0.5 * 10 + 30) / 40), 40)
    assert s.weighted("position") == (0.25, 4)
    acc, n = s.weighted("all")
    assert n == 44 and acc == pytest.approx((5 + 30 + 1) / 44)


def test_summary_rows_recompute():
    rows = summary_rows([_report()])
    assert [r[:3] for r in rows] == [["layered_transfer", "Common", "activity"],
                                     ["layered_transfer", "Common", "position"],
                                     ["layered_transfer", "Common", "all"],
                                     ["layered_transfer", "Personalize", "activity"],
                                     ["layered_transfer", "Personalize", "all"]]
    assert rows[0][3:] == ["0.8750", "40"]


def test_emit_and_load_round_trip(tmp_path):
    rep = _report()
    emit_report([rep], tmp_path)
    back = load_report(tmp_path / "report.json")[0]
    assert back.to_dict() == rep.to_dict()
    doc = json.loads((tmp_path / "report.json").read_text())
    for st_doc, stage in zip(doc["reports"][0]["stages"], rep.stages):
        for task, w in st_doc["weighted"].items():
            assert w["accuracy"] == stage.weighted(task)[0]
    with (tmp_path / "summary.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["regime", "stage", "task", "weighted_accuracy", "n_total"]
    assert rows[1:] == summary_rows([rep])
    cm = tmp_path / "confusion" / "layered_transfer__a__activity.csv"
    assert cm.read_text().splitlines() == ["true\\pred,0,1", "0,9,1", "1,0,0"]


def test_load_rejects_unknown_schema(tmp_path):
    (tmp_path / "r.json").write_text('{"schema_version": 99, "reports": []}')
    with pytest.raises(ValueError):
        load_report(tmp_path / "r.json")


def test_emit_is_byte_stable(tmp_path):
    emit_report(_report(), tmp_path / "a")
    emit_report(_report(), tmp_path / "b")
    for name in ("report.json", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_format_table_marks_missing_tasks():
    table = format_table([_report()])
    lines = table.splitlines()
    assert lines[0].split()[1:] == ["activity", "position", "all"]
    assert "87.5%" in lines[1]
    assert lines[2].split()[2] == "-"
