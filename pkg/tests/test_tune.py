import math
from fractions import Fraction

import pytest

from lidaraugment.policy import OP_ORDER, default_policy, dumps_policy, resolve
from lidaraugment.tune import (
    DEFAULT_M_GRID,
    DEFAULT_P_GRID,
    FAILED,
    TABLE_HEADER,
    EvaluationError,
    align_all,
    align_op,
    read_table,
    run_alignment,
    search_mp,
)

ANCHOR = (Fraction(1, 2), Fraction(5))


def raw_optima(spec=None):
    """Unclipped value of every formula at the anchor, keyed by (op, param key)."""
    spec = spec or default_policy()
    out = {}
    for op in spec.ops:
        for f in op.formulas:
            g = ANCHOR[1] if f.driver == "m" else ANCHOR[0]
            out[(op.name, f.key)] = f.offset + f.coeff * g
    return out


TARGETS = raw_optima()


def table_stub(spec, m, p, seed):
    """Peaks when every constant op carries the published optimum."""
    err = Fraction(0)
    for op in spec.ops:
        if all(f.coeff == 0 for f in op.formulas):
            err += sum((f.offset - TARGETS[(op.name, f.key)]) ** 2 for f in op.formulas)
    return -float(err)


def candidate_grids():
    """Per-op grids that contain the optimum plus distractors on both sides."""
    spec = default_policy()
    grids = {}
    for op in spec.ops:
        per_driver = {}
        for driver in ("p", "m"):
            keys = [f.key for f in op.formulas if f.driver == driver]
            best = {k: float(TARGETS[(op.name, k)]) for k in keys}
            if not keys:
                per_driver[driver] = [0.0]
                continue
            per_driver[driver] = [
                {k: v * 0.5 for k, v in best.items()},
                best,
                {k: v * 1.5 + 0.1 for k, v in best.items()},
            ]
        grids[op.name] = (per_driver["p"], per_driver["m"])
    return grids


def test_translate_worked_example():
    probs = [0.3, 0.5, 0.7, 0.9]
    mags = [0.9, 1.5, 2.1, 2.7, 3.3, 3.9]

    def score(spec, m, p, seed):
        r = resolve(spec, m, p)["GlobalTranslate"]
        return -((r.probability() - 0.7) ** 2) - (r.get("stdev") - 3.3) ** 2

    entry = align_op("GlobalTranslate", probs, mags, score)
    assert (entry.prob, entry.mag) == (0.7, 3.3)
    assert entry.coefficients == {"probability": Fraction(7, 5), "stdev": Fraction(33, 50)}
    assert entry.evaluations == 24


def test_single_candidate_grid():
    entry = align_op("GlobalTranslate", [0.4], [2.0], lambda *a: 0.0)
    assert (entry.prob, entry.mag) == (0.4, 2.0)
    assert entry.coefficients["probability"] == Fraction(4, 5)
    assert entry.coefficients["stdev"] == Fraction(2, 5)


def test_unimodal_peak_recovered():
    probs = [0.2, 0.4, 0.6, 0.8, 1.0]
    mags = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]

    def score(spec, m, p, seed):
        r = resolve(spec, m, p)["GlobalTranslate"]
        return -((r.probability() - 0.6) ** 2) - (r.get("stdev") - 2.0) ** 2

    entry = align_op("GlobalTranslate", probs, mags, score)
    assert (entry.prob, entry.mag) == (0.6, 2.0)


def test_ties_prefer_weaker_augmentation():
    entry = align_op("GlobalScale", [0.9, 0.3, 0.6], [0.2, 0.1], lambda *a: 1.0)
    assert (entry.prob, entry.mag) == (0.3, 0.1)


def test_other_ops_disabled_during_alignment():
    seen = []

    def score(spec, m, p, seed):
        r = resolve(spec, m, p)
        seen.append([o.name for o in r.ops if any(v > 0 for k, v in o.values.items() if k.startswith("probability"))])
        return 0.0

    align_op("GlobalRot", [0.5], [0.5], score)
    assert seen == [["GlobalRot"]]


def test_evaluator_error_names_grid_point():
    def boom(*a):
        raise RuntimeError("down")

    with pytest.raises(EvaluationError, match="prob=0.5"):
        align_op("GlobalRot", [0.5], [0.5], boom)


def test_align_two_ops_roundtrip():
    optimum = {"GlobalTranslate": (0.9, 2.7), "GlobalScale": (0.3, 0.12)}
    params = {"GlobalTranslate": "stdev", "GlobalScale": "half_width"}

    def score(spec, m, p, seed):
        total = 0.0
        for name, (po, mo) in optimum.items():
            f = {g.name: g for g in spec.op(name).formulas}
            if f["probability"].coeff == 0 and f["probability"].offset != 0:
                total -= (float(f["probability"].offset) - po) ** 2 + (float(f[params[name]].offset) - mo) ** 2
        return total

    grids = {
        "GlobalTranslate": ([0.3, 0.6, 0.9], [0.9, 2.7, 3.9]),
        "GlobalScale": ([0.3, 0.6], [0.04, 0.12, 0.2]),
    }
    spec = align_all(["GlobalTranslate", "GlobalScale"], grids, score)
    r = resolve(spec, 5, 0.5)
    assert r["GlobalTranslate"].probability() == 0.9
    assert r["GlobalTranslate"].get("stdev") == 2.7
    assert r["GlobalScale"].probability() == 0.3
    assert r["GlobalScale"].get("half_width") == 0.12


def test_align_all_reproduces_default_policy():
    grids = candidate_grids()
    result = run_alignment(grids, table_stub)
    assert dumps_policy(result.spec) == dumps_policy(default_policy())
    expected_calls = sum(len(p) * len(m) for p, m in grids.values())
    assert result.evaluations == expected_calls


def test_align_all_rejects_missing_grid():
    with pytest.raises(ValueError):
        align_all(["GlobalRot"], {}, table_stub)


def peaked(spec, m, p, seed):
    return -((m - 5) ** 2) - 100 * (p - 0.5) ** 2


def test_search_finds_peak():
    calls = []

    def ev(spec, m, p, seed):
        calls.append((m, p))
        return peaked(spec, m, p, seed)

    res = search_mp(default_policy(), evaluator=ev)
    assert (res.m, res.p) == (5.0, 0.5)
    assert len(calls) == 100 and res.evaluations == 100
    assert len(res.table) == 100
    for cell in res.table[::17]:
        assert cell.score == peaked(None, cell.m, cell.p, 0)


def test_search_single_cell():
    res = search_mp(default_policy(), [3.0], [0.2], evaluator=lambda *a: 1.5)
    assert (res.m, res.p, res.score) == (3.0, 0.2, 1.5)


def test_search_ties_prefer_small_knobs():
    res = search_mp(default_policy(), [2.0, 1.0], [0.4, 0.3], evaluator=lambda *a: 0.0)
    assert (res.m, res.p) == (1.0, 0.3)


def test_search_marks_failures():
    def flaky(spec, m, p, seed):
        if m == 5.0:
            raise RuntimeError("crash")
        return peaked(spec, m, p, seed)

    res = search_mp(default_policy(), evaluator=flaky)
    failed = [c for c in res.table if c.status == FAILED]
    assert len(failed) == 10 and all(math.isnan(c.score) for c in failed)
    assert res.m in (4.0, 6.0) and res.p == 0.5


def test_search_all_failed():
    res = search_mp(default_policy(), [1.0], [0.5], evaluator=lambda *a: math.nan)
    assert res.m is None and res.table[0].status == FAILED


def test_search_resume_after_interrupt(tmp_path):
    path = tmp_path / "table.tsv"
    calls = []

    def dies_at_50(spec, m, p, seed):
        if len(calls) == 50:
            raise KeyboardInterrupt
        calls.append((m, p))
        return peaked(spec, m, p, seed)

    with pytest.raises(KeyboardInterrupt):
        search_mp(default_policy(), evaluator=dies_at_50, table_path=path)
    assert len(read_table(path)) == 50
    # a half-written line at the end must be ignored
    with open(path, "a") as fh:
        fh.write("6.0\t0.1\t-1")
    resumed = search_mp(default_policy(), evaluator=peaked, table_path=path)
    assert resumed.evaluations == 50
    fresh_path = tmp_path / "fresh.tsv"
    fresh = search_mp(default_policy(), evaluator=peaked, table_path=fresh_path)
    assert path.read_bytes() == fresh_path.read_bytes()
    assert (resumed.m, resumed.p) == (fresh.m, fresh.p) == (5.0, 0.5)
    assert path.read_text().splitlines()[0] == TABLE_HEADER


def test_search_parallel_matches_serial(tmp_path):
    a = search_mp(default_policy(), evaluator=peaked, jobs=4, table_path=tmp_path / "a.tsv")
    b = search_mp(default_policy(), evaluator=peaked, table_path=tmp_path / "b.tsv")
    assert a.table == b.table
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_default_grids():
    assert DEFAULT_M_GRID == tuple(float(i) for i in range(1, 11))
    assert DEFAULT_P_GRID[0] == 0.1 and DEFAULT_P_GRID[-1] == 1.0 and len(DEFAULT_P_GRID) == 10
    assert set(OP_ORDER) == set(candidate_grids())
