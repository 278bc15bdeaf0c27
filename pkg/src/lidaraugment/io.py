"""Text file formats: LAF1 frames and range images, LAB1 object banks.

Floats are written with 17 significant digits so parsing returns the same
doubles bit-for-bit.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import NO_RAY, Box3D, Frame, LidarAugmentError, Points
from .ops import ObjectExemplar
from .rangeview import EMPTY, RangeGeometry, RangeImage

FRAME_MAGIC = "LAF1"
BANK_MAGIC = "LAB1"
FRAME_SUFFIX = ".laf"


class FrameFormatError(LidarAugmentError, ValueError):
    def __init__(self, source: str, line: int, message: str) -> None:
        super().__init__(f"{source}:{line}: {message}")
        self.source = source
        self.line = line


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _box_line(b: Box3D) -> str:
    vals = " ".join(fmt(v) for v in (b.cx, b.cy, b.cz, b.length, b.width, b.height, b.heading))
    return f"{vals} {b.class_id} {b.box_uid}"


def _rows(template: str, *columns: np.ndarray) -> list[str]:
    table = np.column_stack(columns).tolist() if len(columns[0]) else []
    return [template % tuple(r) for r in table]


def _point_rows(pts: Points) -> list[str]:
    # tolist() turns the int columns into floats; %d prints them back as integers
    return _rows("%.17g %.17g %.17g %.17g %.17g %d %d", pts.xyz, pts.intensity, pts.elongation, pts.ray_row, pts.ray_col)


def dumps_frame(frame: Frame) -> str:
    pts = frame.points
    out = [FRAME_MAGIC, f"frame {frame.frame_id} {len(pts)} {len(frame.boxes)} {frame.rows} {frame.cols}"]
    out.extend(_point_rows(pts))
    out.extend(_box_line(b) for b in frame.boxes)
    return "\n".join(out) + "\n"


class _Lines:
    def __init__(self, text: str, source: str) -> None:
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.source = source
        self.pos = 0

    def error(self, message: str, line: int | None = None) -> FrameFormatError:
        return FrameFormatError(self.source, self.pos if line is None else line, message)

    def next(self, n_tokens: int | None = None, what: str = "line") -> list[str]:
        if self.pos >= len(self.lines):
            raise FrameFormatError(self.source, self.pos + 1, f"unexpected end of file, expected {what}")
        line = self.lines[self.pos]
        self.pos += 1
        toks = line.split()
        if n_tokens is not None and len(toks) != n_tokens:
            raise self.error(f"expected {n_tokens} fields in {what}, got {len(toks)}")
        return toks

    def done(self) -> None:
        if self.pos != len(self.lines):
            raise FrameFormatError(self.source, self.pos + 1, "trailing content after last record")

    def block(self, n: int, n_tokens: int, what: str) -> list[list[str]]:
        """Next ``n`` lines split into tokens, each required to have ``n_tokens`` fields."""
        if self.pos + n > len(self.lines):
            raise FrameFormatError(self.source, len(self.lines) + 1, f"unexpected end of file, expected {what}")
        rows = [line.split() for line in self.lines[self.pos : self.pos + n]]
        for k, toks in enumerate(rows):
            if len(toks) != n_tokens:
                raise self.error(f"expected {n_tokens} fields in {what}, got {len(toks)}", self.pos + k + 1)
        self.pos += n
        return rows

    def float_block(self, rows: list[list[str]], cols: slice) -> np.ndarray:
        start = self.pos - len(rows)
        try:
            arr = np.array([r[cols] for r in rows], dtype=np.float64).reshape(len(rows), cols.stop - cols.start)
        except ValueError:
            for k, r in enumerate(rows):
                self.pos = start + k + 1
                self.floats(r[cols])
            raise
        bad = ~np.isfinite(arr).all(axis=1)
        if bad.any():
            raise self.error("non-finite value", start + int(np.argmax(bad)) + 1)
        return arr

    def int_block(self, rows: list[list[str]], cols: slice) -> np.ndarray:
        start = self.pos - len(rows)
        try:
            ints = [[int(t) for t in r[cols]] for r in rows]
            return np.array(ints, dtype=np.int64).reshape(len(rows), cols.stop - cols.start)
        except ValueError:
            for k, r in enumerate(rows):
                self.pos = start + k + 1
                for t in r[cols]:
                    self.int_(t)
            raise

    def floats(self, toks: Sequence[str]) -> list[float]:
        try:
            vals = [float(t) for t in toks]
        except ValueError as exc:
            raise self.error(str(exc)) from None
        if not all(np.isfinite(vals)):
            raise self.error("non-finite value")
        return vals

    def int_(self, tok: str) -> int:
        try:
            return int(tok)
        except ValueError:
            raise self.error(f"expected an integer, got {tok!r}") from None


def _parse_box(src: _Lines) -> Box3D:
    toks = src.next(9, "box record")
    vals = src.floats(toks[:7])
    try:
        return Box3D(*vals, toks[7], src.int_(toks[8]))
    except ValueError as exc:
        raise src.error(str(exc)) from None


def loads_frame(text: str, source: str = "<frame>") -> Frame:
    src = _Lines(text, source)
    if src.next(1, "magic") != [FRAME_MAGIC]:
        raise src.error(f"missing {FRAME_MAGIC} magic")
    head = src.next(6, "frame header")
    if head[0] != "frame":
        raise src.error("expected 'frame' header")
    n_points, n_boxes, rows, cols = (src.int_(t) for t in head[2:])
    if min(n_points, n_boxes, rows, cols) < 0:
        raise src.error("negative count in header")
    records = src.block(n_points, 7, "point record")
    vals = src.float_block(records, slice(0, 5))
    rays = src.int_block(records, slice(5, 7))
    bad = (rays < NO_RAY).any(axis=1)
    if bad.any():
        raise src.error("ray index must be >= 0 or -1", src.pos - n_points + int(np.argmax(bad)) + 1)
    xyz, feats = vals[:, :3], vals[:, 3:]
    boxes = [_parse_box(src) for _ in range(n_boxes)]
    src.done()
    try:
        points = Points.from_arrays(xyz, feats[:, 0], feats[:, 1], rays[:, 0], rays[:, 1])
        return Frame(head[1], points, tuple(boxes), rows, cols)
    except ValueError as exc:
        raise FrameFormatError(source, 2, str(exc)) from None


def atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def read_frame(path) -> Frame:
    path = Path(path)
    return loads_frame(path.read_text(encoding="utf-8"), str(path))


def write_frame(path, frame: Frame) -> None:
    atomic_write(path, dumps_frame(frame))


def frame_files(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix == FRAME_SUFFIX and p.is_file())


def read_frames(directory) -> list[Frame]:
    return [read_frame(p) for p in frame_files(directory)]


# -- object bank ----------------------------------------------------------------------


def dumps_bank(exemplars: Iterable[ObjectExemplar]) -> str:
    out = [BANK_MAGIC]
    for ex in exemplars:
        p = ex.points
        out.append(f"exemplar {ex.source_frame_id} {len(p)}")
        out.append(_box_line(ex.box))
        out.extend(_rows("%.17g %.17g %.17g %.17g %.17g", p.xyz, p.intensity, p.elongation))
    return "\n".join(out) + "\n"


def loads_bank(text: str, source: str = "<bank>") -> list[ObjectExemplar]:
    src = _Lines(text, source)
    if src.next(1, "magic") != [BANK_MAGIC]:
        raise src.error(f"missing {BANK_MAGIC} magic")
    out = []
    while src.pos < len(src.lines):
        head = src.next(3, "exemplar header")
        if head[0] != "exemplar":
            raise src.error("expected 'exemplar' header")
        n = src.int_(head[2])
        box = _parse_box(src)
        arr = src.float_block(src.block(n, 5, "exemplar point"), slice(0, 5))
        out.append(ObjectExemplar(box, Points.from_arrays(arr[:, :3], arr[:, 3], arr[:, 4]), head[1]))
    return out


def read_bank(path) -> list[ObjectExemplar]:
    path = Path(path)
    return loads_bank(path.read_text(encoding="utf-8"), str(path))


# -- range images ---------------------------------------------------------------------


def dumps_image(img: RangeImage, image_id: str) -> str:
    g = img.geometry
    out = [
        FRAME_MAGIC,
        f"image {image_id} {g.rows} {g.cols} {fmt(g.azimuth_origin)}",
        " ".join(fmt(t) for t in g.inclinations),
    ]
    out.extend(_rows("%.17g %.17g %.17g", img.range.ravel(), img.intensity.ravel(), img.elongation.ravel()))
    return "\n".join(out) + "\n"


def loads_image(text: str, source: str = "<image>") -> tuple[str, RangeImage]:
    src = _Lines(text, source)
    if src.next(1, "magic") != [FRAME_MAGIC]:
        raise src.error(f"missing {FRAME_MAGIC} magic")
    head = src.next(5, "image header")
    if head[0] != "image":
        raise src.error("expected 'image' header")
    rows, cols = src.int_(head[2]), src.int_(head[3])
    origin = src.floats([head[4]])[0]
    incl = src.floats(src.next(rows, "inclination table"))
    cells = src.float_block(src.block(rows * cols, 3, "cell"), slice(0, 3)).reshape(rows, cols, 3)
    src.done()
    try:
        geometry = RangeGeometry(rows, cols, tuple(incl), origin)
        return head[1], RangeImage(geometry, cells[..., 0], cells[..., 1], cells[..., 2])
    except ValueError as exc:
        raise FrameFormatError(source, 2, str(exc)) from None


__all__ = [
    "EMPTY",
    "FrameFormatError",
    "atomic_write",
    "dumps_bank",
    "dumps_frame",
    "dumps_image",
    "frame_files",
    "loads_bank",
    "loads_frame",
    "loads_image",
    "read_bank",
    "read_frame",
    "read_frames",
    "write_frame",
]
