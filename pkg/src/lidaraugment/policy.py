"""Two-knob search space: every op parameter is a clipped linear function of m or p.

Formulas are data. A :class:`PolicySpec` is read from and written to a
tab-separated text file (see ``default_policy.txt`` for the grammar), and
the shipped default holds the aligned Waymo search space.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from decimal import Decimal, localcontext
from fractions import Fraction
from importlib import resources
from typing import Iterable, Mapping, MutableMapping, Sequence

from . import ops
from .core import ConfigurationError, Frame, RngStream
from .rangeview import assign_rays, frame_geometry, resolve_occlusion

DROP_BOX = "DropBox"
PASTE_BOX = "PasteBox"
SWAP_BACKGROUND = "SwapBackground"
GLOBAL_ROT = "GlobalRot"
GLOBAL_SCALE = "GlobalScale"
GLOBAL_DROP = "GlobalDrop"
FRUSTUM_DROP = "FrustumDrop"
FRUSTUM_NOISE = "FrustumNoise"
GLOBAL_TRANSLATE = "GlobalTranslate"
GLOBAL_FLIP = "GlobalFlip"

OP_ORDER = (
    DROP_BOX,
    PASTE_BOX,
    SWAP_BACKGROUND,
    GLOBAL_ROT,
    GLOBAL_SCALE,
    GLOBAL_DROP,
    FRUSTUM_DROP,
    FRUSTUM_NOISE,
    GLOBAL_TRANSLATE,
    GLOBAL_FLIP,
)

# the joint search only ever sees these two knobs
SEARCH_KNOBS = ("m", "p")

MAGNITUDE = "m"
PROBABILITY = "p"
UNITS = {"1": 1.0, "pi": math.pi}

_HEADER = (
    "# lidaraugment policy v1",
    "# value = unit * clip(offset + coeff * driver, lo, hi); clip bounds are in the parameter's unit",
    '# driver: m (magnitude) or p (probability); class "-" applies to the whole frame; "-" bound = unbounded',
    "# op\tparam\tclass\tdriver\tcoeff\toffset\tunit\tlo\thi\ttype",
)


class PolicyFormatError(ConfigurationError):
    pass


@dataclass(frozen=True)
class ParamFormula:
    name: str
    driver: str
    coeff: Fraction
    offset: Fraction = Fraction(0)
    clip_lo: Fraction | None = None
    clip_hi: Fraction | None = None
    cls: str | None = None
    unit: str = "1"
    integer: bool = False

    def __post_init__(self) -> None:
        if self.driver not in (MAGNITUDE, PROBABILITY):
            raise ValueError(f"driver must be 'm' or 'p', got {self.driver!r}")
        if self.unit not in UNITS:
            raise ValueError(f"unknown unit {self.unit!r}")
        for attr in ("coeff", "offset", "clip_lo", "clip_hi"):
            v = getattr(self, attr)
            if v is not None:
                object.__setattr__(self, attr, Fraction(v))
        if self.clip_lo is not None and self.clip_hi is not None and self.clip_lo > self.clip_hi:
            raise ValueError(f"{self.key}: clip_lo > clip_hi")

    @property
    def key(self) -> str:
        return self.name if self.cls is None else f"{self.name}[{self.cls}]"

    def resolve(self, g: float) -> float | int:
        """Evaluate at driver value ``g``; arithmetic is exact until the final float."""
        v = self.offset + self.coeff * Fraction(g)
        if self.clip_lo is not None:
            v = max(v, self.clip_lo)
        if self.clip_hi is not None:
            v = min(v, self.clip_hi)
        if self.integer:
            return round(v)
        if self.unit == "1":
            return float(v)
        return float(v) * UNITS[self.unit]


@dataclass(frozen=True)
class OpSpec:
    name: str
    formulas: tuple[ParamFormula, ...]

    def formula(self, name: str, cls: str | None = None) -> ParamFormula:
        for f in self.formulas:
            if f.name == name and f.cls == cls:
                return f
        raise KeyError(f"{self.name} has no parameter {name}" + (f"[{cls}]" if cls else ""))

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(sorted({f.cls for f in self.formulas if f.cls is not None}))


@dataclass(frozen=True)
class PolicySpec:
    ops: tuple[OpSpec, ...]

    def __post_init__(self) -> None:
        names = [o.name for o in self.ops]
        unknown = [n for n in names if n not in OP_ORDER]
        if unknown:
            raise ConfigurationError(f"unknown ops: {unknown}")
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate op in policy")
        if names != [n for n in OP_ORDER if n in names]:
            raise ConfigurationError("ops must follow the canonical pipeline order")
        for op in self.ops:
            keys = [f.key for f in op.formulas]
            if len(set(keys)) != len(keys):
                raise ConfigurationError(f"{op.name} defines a parameter twice")

    def op(self, name: str) -> OpSpec:
        for o in self.ops:
            if o.name == name:
                return o
        raise KeyError(name)

    @property
    def op_names(self) -> tuple[str, ...]:
        return tuple(o.name for o in self.ops)

    @property
    def n_hyperparameters(self) -> int:
        """Raw per-op parameters this space collapses onto (m, p)."""
        return sum(len(o.formulas) for o in self.ops)

    @property
    def n_search_dimensions(self) -> int:
        return len(SEARCH_KNOBS)

    def with_op(self, new: OpSpec) -> "PolicySpec":
        return PolicySpec(tuple(new if o.name == new.name else o for o in self.ops))

    def digest(self) -> str:
        return hashlib.sha256(dumps_policy(self).encode()).hexdigest()


# -- text format ----------------------------------------------------------------


def _fmt_number(x: Fraction) -> str:
    x = Fraction(x)
    den = x.denominator
    for p in (2, 5):
        while den % p == 0:
            den //= p
    if den != 1:
        return repr(float(x))
    if x.denominator == 1:
        return str(x.numerator)
    with localcontext() as ctx:
        ctx.prec = 400
        d = Decimal(x.numerator) / Decimal(x.denominator)
    return format(d.normalize(), "f")


def _parse_number(tok: str, where: str) -> Fraction:
    try:
        return Fraction(tok)
    except (ValueError, ZeroDivisionError):
        raise PolicyFormatError(f"{where}: bad number {tok!r}") from None


def dumps_policy(spec: PolicySpec) -> str:
    lines = list(_HEADER)
    for op in spec.ops:
        for f in op.formulas:
            lines.append(
                "\t".join(
                    [
                        op.name,
                        f.name,
                        f.cls or "-",
                        f.driver,
                        _fmt_number(f.coeff),
                        _fmt_number(f.offset),
                        f.unit,
                        "-" if f.clip_lo is None else _fmt_number(f.clip_lo),
                        "-" if f.clip_hi is None else _fmt_number(f.clip_hi),
                        "int" if f.integer else "real",
                    ]
                )
            )
    return "\n".join(lines) + "\n"


def loads_policy(text: str, source: str = "<policy>") -> PolicySpec:
    order: list[str] = []
    formulas: dict[str, list[ParamFormula]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        toks = line.split()
        if len(toks) != 10:
            raise PolicyFormatError(f"{where}: expected 10 fields, got {len(toks)}")
        op, name, cls, driver, coeff, offset, unit, lo, hi, kind = toks
        if kind not in ("real", "int"):
            raise PolicyFormatError(f"{where}: type must be real or int")
        try:
            f = ParamFormula(
                name=name,
                driver=driver,
                coeff=_parse_number(coeff, where),
                offset=_parse_number(offset, where),
                clip_lo=None if lo == "-" else _parse_number(lo, where),
                clip_hi=None if hi == "-" else _parse_number(hi, where),
                cls=None if cls == "-" else cls,
                unit=unit,
                integer=kind == "int",
            )
        except ValueError as exc:
            raise PolicyFormatError(f"{where}: {exc}") from None
        if op not in formulas:
            order.append(op)
            formulas[op] = []
        formulas[op].append(f)
    try:
        return PolicySpec(tuple(OpSpec(name, tuple(formulas[name])) for name in order))
    except ConfigurationError as exc:
        raise PolicyFormatError(f"{source}: {exc}") from None


def load_policy(path) -> PolicySpec:
    with open(path, encoding="utf-8") as fh:
        return loads_policy(fh.read(), str(path))


def default_policy_text() -> str:
    return resources.files(__package__).joinpath("default_policy.txt").read_text(encoding="utf-8")


def default_policy() -> PolicySpec:
    """The aligned Waymo search space with its clip rules."""
    return loads_policy(default_policy_text(), "default_policy.txt")


# -- resolution -----------------------------------------------------------------


@dataclass(frozen=True)
class ResolvedOp:
    name: str
    values: Mapping[str, float | int]

    def get(self, param: str, cls: str | None = None, default=None):
        key = param if cls is None else f"{param}[{cls}]"
        return self.values.get(key, default)

    def per_class(self, param: str) -> dict[str, float | int]:
        prefix = param + "["
        return {k[len(prefix) : -1]: v for k, v in self.values.items() if k.startswith(prefix)}

    def probability(self, cls: str | None = None) -> float:
        return self.values.get("probability" if cls is None else f"probability[{cls}]", 0.0)


@dataclass(frozen=True)
class ResolvedPolicy:
    m: float
    p: float
    ops: tuple[ResolvedOp, ...]

    def __getitem__(self, name: str) -> ResolvedOp:
        for o in self.ops:
            if o.name == name:
                return o
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(o.name == name for o in self.ops)


def _check_knobs(m: float, p: float) -> None:
    if not (isinstance(m, (int, float)) and math.isfinite(m) and m >= 0):
        raise ValueError(f"magnitude m must be a finite number >= 0, got {m!r}")
    if not (isinstance(p, (int, float)) and 0 <= p <= 1):
        raise ValueError(f"probability p must lie in [0, 1], got {p!r}")


def resolve(spec: PolicySpec, m: float, p: float) -> ResolvedPolicy:
    _check_knobs(m, p)
    out = []
    for op in spec.ops:
        values = {f.key: f.resolve(m if f.driver == MAGNITUDE else p) for f in op.formulas}
        out.append(ResolvedOp(op.name, values))
    return ResolvedPolicy(float(m), float(p), tuple(out))


def invariant_violations(resolved: ResolvedPolicy) -> list[str]:
    """Clip-rule checks; an empty list means the resolved policy is valid."""
    bad = []
    for op in resolved.ops:
        for key, v in op.values.items():
            name = key.split("[")[0]
            limits = {
                "probability": (0.0, 0.5 if op.name == GLOBAL_FLIP else 1.0),
                "max_angle": (0.0, math.pi),
                "drop_ratio": (0.0, 0.8),
                "width_theta": (0.0, math.pi),
                "width_phi": (0.0, 2 * math.pi),
                "min_range": (0.0, math.inf),
                "count": (0, math.inf),
                "half_width": (0.0, 1.0 - 1e-12),
                "stdev": (0.0, math.inf),
                "max_noise": (0.0, math.inf),
            }.get(name)
            if limits and not (limits[0] <= v <= limits[1]):
                bad.append(f"{op.name}.{key}={v!r} outside [{limits[0]}, {limits[1]}]")
    return bad


# -- pipeline -------------------------------------------------------------------


@dataclass(frozen=True)
class Banks:
    """Paste exemplars and swap partners available to the pipeline."""

    exemplars: Sequence[ops.ObjectExemplar] = ()
    partners: Sequence[Frame] = ()


def op_stream(rng: RngStream, spec: PolicySpec, name: str) -> RngStream:
    """Stream the pipeline hands to op ``name``."""
    return rng.derive(name, spec.op_names.index(name))


def check_banks(resolved: ResolvedPolicy, banks: Banks | None) -> None:
    banks = banks or Banks()
    if PASTE_BOX in resolved:
        op = resolved[PASTE_BOX]
        probs, counts = op.per_class("probability"), op.per_class("count")
        have = {e.box.class_id for e in banks.exemplars}
        for cls, count in counts.items():
            if count > 0 and probs.get(cls, 0) > 0 and cls not in have:
                raise ConfigurationError(f"PasteBox enabled for {cls} but the object bank has none")
    if SWAP_BACKGROUND in resolved and resolved[SWAP_BACKGROUND].probability() > 0 and not banks.partners:
        raise ConfigurationError("SwapBackground enabled but no partner frames were given")


def _record(fired: MutableMapping[str, int] | None, key: str, hit: bool) -> None:
    if fired is not None:
        fired[key] = fired.get(key, 0) + int(hit)


def apply_pipeline(
    frame: Frame,
    spec: PolicySpec,
    m: float,
    p: float,
    rng: RngStream,
    banks: Banks | None = None,
    fired: MutableMapping[str, int] | None = None,
) -> Frame:
    """Run every op of ``spec`` in order.

    ``fired`` (optional) accumulates each op's gate outcome, keyed by op name
    or ``op/CLASS`` for per-class box ops. If PasteBox or SwapBackground
    fired, one occlusion pass runs at the end.
    """
    resolved = resolve(spec, m, p)
    check_banks(resolved, banks)
    return run_resolved(frame, resolved, spec, rng, banks, fired)


def run_resolved(frame, resolved, spec, rng, banks=None, fired=None) -> Frame:
    banks = banks or Banks()
    inserted = False
    for index, op in enumerate(resolved.ops):
        stream = rng.derive(op.name, index)
        name = op.name
        if name in (DROP_BOX, PASTE_BOX):
            probs = op.per_class("probability")
            counts = op.per_class("count")
            for cls in sorted(counts):
                _record(fired, f"{name}/{cls}", ops.gate(stream, probs.get(cls, 0.0), f"gate:{cls}"))
            if name == DROP_BOX:
                frame = ops.drop_box(frame, counts, stream, probs)
            else:
                before = len(frame.boxes)
                frame = ops.paste_box(frame, banks.exemplars, counts, stream, probs, resolve=False)
                inserted |= len(frame.boxes) != before
            continue
        prob = op.probability()
        hit = ops.gate(stream, prob)
        _record(fired, name, hit)
        if name == SWAP_BACKGROUND:
            if hit:
                partner = banks.partners[int(stream.derive("partner").generator().integers(len(banks.partners)))]
                frame = ops.swap_background(frame, partner, stream, prob, resolve=False)
                inserted = True
        elif name == GLOBAL_ROT:
            frame = ops.global_rotate(frame, op.get("max_angle"), stream, prob)
        elif name == GLOBAL_SCALE:
            frame = ops.global_scale(frame, op.get("half_width"), stream, prob)
        elif name == GLOBAL_DROP:
            frame = ops.global_drop(frame, op.get("drop_ratio"), stream, prob)
        elif name == FRUSTUM_DROP:
            frame = ops.frustum_drop(
                frame, op.get("width_theta"), op.get("width_phi"), op.get("min_range"), op.get("drop_ratio"), stream, prob
            )
        elif name == FRUSTUM_NOISE:
            frame = ops.frustum_noise(
                frame, op.get("width_theta"), op.get("width_phi"), op.get("min_range"), op.get("max_noise"), stream, prob
            )
        elif name == GLOBAL_TRANSLATE:
            frame = ops.global_translate(frame, op.get("stdev"), stream, prob)
        elif name == GLOBAL_FLIP:
            frame = ops.global_flip(frame, stream, prob)
    if inserted:
        geometry = frame_geometry(frame.rows, frame.cols)
        if geometry is not None:
            frame = frame.replace(points=resolve_occlusion(assign_rays(frame.points, geometry)))
    return frame


def only(spec: PolicySpec, names: Iterable[str]) -> PolicySpec:
    """Copy of ``spec`` with every probability outside ``names`` forced to zero."""
    keep = set(names)
    new_ops = []
    for op in spec.ops:
        if op.name in keep:
            new_ops.append(op)
            continue
        formulas = tuple(
            replace(f, coeff=Fraction(0), offset=Fraction(0)) if f.name == "probability" else f for f in op.formulas
        )
        new_ops.append(OpSpec(op.name, formulas))
    return PolicySpec(tuple(new_ops))
