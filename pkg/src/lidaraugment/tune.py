"""Per-op search-space alignment and the joint (m, p) grid search.

An evaluator is any callable ``(spec, m, p, seed) -> float`` where higher is
better. It must be deterministic for identical arguments.
"""

from __future__ import annotations

import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, Union

from .core import LidarAugmentError
from .policy import MAGNITUDE, PROBABILITY, OpSpec, PolicySpec, default_policy, only

log = logging.getLogger(__name__)

Evaluator = Callable[[PolicySpec, float, float, int], float]
Candidate = Union[float, Mapping[str, float]]

DEFAULT_ANCHOR = (0.5, 5.0)  # (p*, m*)
DEFAULT_M_GRID = tuple(float(m) for m in range(1, 11))
DEFAULT_P_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))

TABLE_HEADER = "m\tp\tscore\tstatus"
OK = "ok"
FAILED = "failed"


class EvaluationError(LidarAugmentError, RuntimeError):
    pass


def _exact(v) -> Fraction:
    """Decimal reading of a number, so 3.3 / 5 gives exactly 0.66."""
    if isinstance(v, (int, Fraction)):
        return Fraction(v)
    return Fraction(repr(float(v)))


# -- alignment ------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentEntry:
    op: str
    prob: Candidate
    mag: Candidate
    score: float
    raw_values: Mapping[str, Fraction]
    coefficients: Mapping[str, Fraction]
    anchor: tuple[float, float]
    evaluations: int

    def apply_to(self, template: OpSpec) -> OpSpec:
        return OpSpec(
            template.name,
            tuple(replace(f, coeff=self.coefficients[f.key]) for f in template.formulas),
        )


@dataclass(frozen=True)
class AlignmentResult:
    entries: Mapping[str, AlignmentEntry]
    anchor: tuple[float, float]
    spec: PolicySpec

    @property
    def evaluations(self) -> int:
        return sum(e.evaluations for e in self.entries.values())


def _values_for(template: OpSpec, driver: str, cand: Candidate) -> dict[str, Fraction]:
    keys = [f.key for f in template.formulas if f.driver == driver]
    if isinstance(cand, Mapping):
        missing = set(keys) - set(cand)
        extra = set(cand) - set(keys)
        if missing or extra:
            raise ValueError(f"{template.name}: candidate keys {sorted(cand)} do not match {sorted(keys)}")
        return {k: _exact(cand[k]) for k in keys}
    return {k: _exact(cand) for k in keys}


def _constant_op(template: OpSpec, values: Mapping[str, Fraction]) -> OpSpec:
    return OpSpec(
        template.name,
        tuple(replace(f, coeff=Fraction(0), offset=values[f.key]) for f in template.formulas),
    )


def _order_key(template: OpSpec, driver: str, cand: Candidate) -> tuple:
    vals = _values_for(template, driver, cand)
    return tuple(vals[f.key] for f in template.formulas if f.driver == driver)


def align_op(
    op_name: str,
    prob_candidates: Sequence[Candidate],
    mag_candidates: Sequence[Candidate],
    evaluator: Evaluator,
    anchor: tuple[float, float] = DEFAULT_ANCHOR,
    base: PolicySpec | None = None,
    seed: int = 0,
) -> AlignmentEntry:
    """Grid-search one op in isolation and rescale it onto the anchor.

    Candidates are raw parameter values in each parameter's unit (angles in
    multiples of pi). A scalar applies to every parameter driven by that
    knob; a mapping gives one value per parameter key. With the best raw
    value ``v`` and template offset ``b``, the new coefficient is
    ``(v - b) / anchor``, so resolving the aligned formula at the anchor
    returns ``v``.
    """
    if not prob_candidates or not mag_candidates:
        raise ValueError("candidate grids must be non-empty")
    p_star, m_star = anchor
    if not (p_star > 0 and m_star > 0):
        raise ValueError("anchor components must be positive")
    base = base or default_policy()
    template = base.op(op_name)
    isolated = only(base, [op_name])

    best = None
    calls = 0
    for prob in prob_candidates:
        for mag in mag_candidates:
            values = {**_values_for(template, PROBABILITY, prob), **_values_for(template, MAGNITUDE, mag)}
            spec = isolated.with_op(_constant_op(template, values))
            try:
                score = float(evaluator(spec, m_star, p_star, seed))
            except Exception as exc:
                raise EvaluationError(f"evaluator failed for {op_name} at prob={prob!r}, mag={mag!r}: {exc}") from exc
            calls += 1
            key = (-score, _order_key(template, PROBABILITY, prob), _order_key(template, MAGNITUDE, mag))
            if math.isnan(score):
                continue
            if best is None or key < best[0]:
                best = (key, prob, mag, score, values)
    if best is None:
        raise EvaluationError(f"no finite score for {op_name}")
    _, prob, mag, score, values = best
    coeffs = {}
    for f in template.formulas:
        g = _exact(m_star if f.driver == MAGNITUDE else p_star)
        coeffs[f.key] = (values[f.key] - f.offset) / g
    log.info("aligned %s: prob=%r mag=%r score=%.6g", op_name, prob, mag, score)
    return AlignmentEntry(op_name, prob, mag, score, values, coeffs, (p_star, m_star), calls)


def run_alignment(
    grids: Mapping[str, tuple[Sequence[Candidate], Sequence[Candidate]]],
    evaluator: Evaluator,
    anchor: tuple[float, float] = DEFAULT_ANCHOR,
    base: PolicySpec | None = None,
    seed: int = 0,
) -> AlignmentResult:
    base = base or default_policy()
    entries = {}
    spec = base
    for op in base.op_names:
        if op not in grids:
            continue
        probs, mags = grids[op]
        entry = align_op(op, probs, mags, evaluator, anchor, base, seed)
        entries[op] = entry
        spec = spec.with_op(entry.apply_to(base.op(op)))
    unknown = set(grids) - set(base.op_names)
    if unknown:
        raise ValueError(f"grids given for ops not in the policy: {sorted(unknown)}")
    return AlignmentResult(entries, anchor, spec)


def align_all(ops: Iterable[str], grids, evaluator: Evaluator, anchor=DEFAULT_ANCHOR, base=None, seed=0) -> PolicySpec:
    """Align each op in ``ops`` independently and assemble the new spec."""
    ops = list(ops)
    missing = [o for o in ops if o not in grids]
    if missing:
        raise ValueError(f"no grid for {missing}")
    return run_alignment({o: grids[o] for o in ops}, evaluator, anchor, base, seed).spec


# -- joint search -----------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    m: float
    p: float
    score: float
    status: str

    def line(self) -> str:
        return f"{self.m!r}\t{self.p!r}\t{self.score!r}\t{self.status}"


@dataclass(frozen=True)
class SearchResult:
    m: float | None
    p: float | None
    score: float | None
    table: tuple[Cell, ...]
    evaluations: int


def best_cell(table: Iterable[Cell]) -> Cell | None:
    """Highest score among completed cells; ties go to smaller m, then smaller p."""
    done = [c for c in table if c.status == OK]
    if not done:
        return None
    return min(done, key=lambda c: (-c.score, c.m, c.p))


def read_table(path) -> list[Cell]:
    """Parse a score table, skipping a truncated trailing line."""
    cells = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    for line in lines[1:]:
        toks = line.split("\t")
        if len(toks) != 4 or toks[3] not in (OK, FAILED):
            continue
        try:
            cells.append(Cell(float(toks[0]), float(toks[1]), float(toks[2]), toks[3]))
        except ValueError:
            continue
    return cells


def write_table(path, cells: Iterable[Cell]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join([TABLE_HEADER, *(c.line() for c in cells)]) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def search_mp(
    spec: PolicySpec,
    m_grid: Sequence[float] = DEFAULT_M_GRID,
    p_grid: Sequence[float] = DEFAULT_P_GRID,
    evaluator: Evaluator | None = None,
    seed: int = 0,
    table_path=None,
    jobs: int = 1,
) -> SearchResult:
    """Evaluate every (m, p) pair and return the best.

    With ``table_path`` each finished cell is appended as it completes and
    cells already in the file are not re-evaluated, so an interrupted search
    picks up where it stopped. Evaluator exceptions mark the cell failed.
    """
    if evaluator is None:
        raise ValueError("an evaluator is required")
    if not m_grid or not p_grid:
        raise ValueError("grids must be non-empty")
    if any(not 0 <= p <= 1 for p in p_grid) or any(m < 0 for m in m_grid):
        raise ValueError("p values must lie in [0, 1] and m values must be >= 0")
    grid = [(float(m), float(p)) for m in m_grid for p in p_grid]
    if len(set(grid)) != len(grid):
        raise ValueError("grid contains duplicate cells")

    done: dict[tuple[float, float], Cell] = {}
    if table_path is not None and Path(table_path).exists():
        wanted = set(grid)
        for c in read_table(table_path):
            if (c.m, c.p) in wanted:
                done[(c.m, c.p)] = c
        write_table(table_path, [done[k] for k in grid if k in done])
    elif table_path is not None:
        write_table(table_path, [])

    lock = threading.Lock()
    sink = open(table_path, "a", encoding="utf-8") if table_path is not None else None
    calls = 0

    def run(cell: tuple[float, float]) -> Cell:
        nonlocal calls
        m, p = cell
        with lock:
            calls += 1
        try:
            score = float(evaluator(spec, m, p, seed))
            result = Cell(m, p, score, OK if math.isfinite(score) else FAILED)
        except Exception as exc:  # noqa: BLE001 - recorded in the table
            log.warning("evaluation failed at m=%r p=%r: %s", m, p, exc)
            result = Cell(m, p, math.nan, FAILED)
        if sink is not None:
            with lock:
                sink.write(result.line() + "\n")
                sink.flush()
        return result

    todo = [c for c in grid if c not in done]
    try:
        if jobs <= 1:
            for cell in todo:
                done[cell] = run(cell)
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                for cell, result in zip(todo, pool.map(run, todo)):
                    done[cell] = result
    finally:
        if sink is not None:
            sink.close()

    table = tuple(done[k] for k in grid)
    if table_path is not None:
        write_table(table_path, table)
    best = best_cell(table)
    if best is None:
        return SearchResult(None, None, None, table, calls)
    return SearchResult(best.m, best.p, best.score, table, calls)
