"""KITTI calibration / label / result files.

Labels carry the bottom-center location of a box; internally boxes are
center-anchored, so conversion happens here and nowhere else.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import FieldCount, InvalidField, MalformedNumber, MissingKey
from .geometry import CameraModel, Dimension3D, ObjectBox3D


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


# (min bbox height px, max occlusion level, max truncation)
DIFFICULTY_LIMITS = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


@dataclass(frozen=True)
class KittiObject:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # bottom center x, y, z
    rotation_y: float
    score: float | None = None

    @property
    def height(self) -> float:
        return self.bbox[3] - self.bbox[1]


def _parse_float(token: str, line: int, column: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise MalformedNumber(f"cannot parse {token!r} as a number", line, column) from None


def _tokens(text_line: str):
    """Yield (token, 1-based character column) pairs."""
    col = 0
    for tok in text_line.split():
        col = text_line.index(tok, col)
        yield tok, col + 1
        col += len(tok)


def parse_calib(text: str) -> tuple[CameraModel, dict[str, np.ndarray]]:
    """Return the P2 camera and every ``key: numbers`` entry of the file."""
    entries: dict[str, np.ndarray] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        if ":" not in raw:
            raise MalformedNumber(f"expected 'key: values', got {raw.strip()!r}", lineno, 1)
        key, rest = raw.split(":", 1)
        offset = len(key) + 1
        values = [_parse_float(tok, lineno, offset + col) for tok, col in _tokens(rest)]
        entries[key.strip()] = np.array(values, dtype=np.float64)
        lines[key.strip()] = lineno
    if "P2" not in entries:
        raise MissingKey("calibration has no 'P2' entry")
    p2 = entries["P2"]
    if p2.size != 12:
        raise FieldCount(f"P2 needs 12 values, got {p2.size}", lines["P2"])
    for key, values in entries.items():
        if key.startswith("P") and values.size == 12:
            entries[key] = values.reshape(3, 4)
    return CameraModel(entries["P2"]), entries


def format_calib(P2, extra: dict | None = None) -> str:
    rows = dict(extra or {})
    rows["P2"] = np.asarray(P2, dtype=np.float64)
    order = sorted(rows, key=lambda k: (k != "P0", k != "P1", k != "P2", k != "P3", k))
    return "".join(f"{k}: " + " ".join(f"{v:.12e}" for v in np.ravel(rows[k])) + "\n" for k in order)


def parse_labels(text: str) -> list[KittiObject]:
    objects = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        toks = list(_tokens(raw))
        if len(toks) not in (15, 16):
            raise FieldCount(f"expected 15 or 16 fields, got {len(toks)}", lineno)
        nums = [_parse_float(t, lineno, c) for t, c in toks[1:]]
        occ_tok, occ_col = toks[2]
        if nums[1] != int(nums[1]):
            raise MalformedNumber(f"occlusion must be an integer, got {occ_tok!r}", lineno, occ_col)
        obj = KittiObject(
            type=toks[0][0],
            truncated=nums[0],
            occluded=int(nums[1]),
            alpha=nums[2],
            bbox=tuple(nums[3:7]),
            dimensions=tuple(nums[7:10]),
            location=tuple(nums[10:13]),
            rotation_y=nums[13],
            score=nums[14] if len(nums) == 15 else None,
        )
        _validate(obj, lineno)
        objects.append(obj)
    return objects


def _validate(obj: KittiObject, lineno: int) -> None:
    left, top, right, bottom = obj.bbox
    if right < left or bottom < top:
        raise InvalidField(f"bbox {obj.bbox} has right < left or bottom < top", lineno)
    if obj.type != "DontCare" and min(obj.dimensions) < 0:
        raise InvalidField(f"negative dimensions {obj.dimensions}", lineno)


def _format(obj: KittiObject, with_score: bool) -> str:
    fields = [obj.type, f"{obj.truncated:.2f}", f"{int(obj.occluded)}", f"{obj.alpha:.2f}"]
    fields += [f"{v:.2f}" for v in (*obj.bbox, *obj.dimensions, *obj.location, obj.rotation_y)]
    if with_score:
        fields.append(f"{(obj.score if obj.score is not None else 1.0):.2f}")
    return " ".join(fields)


def write_results(objects) -> str:
    """16-field result lines, two decimals for every real."""
    return "".join(_format(o, True) + "\n" for o in objects)


def write_labels(objects) -> str:
    return "".join(_format(o, False) + "\n" for o in objects)


def difficulty(gt: KittiObject) -> Difficulty:
    if gt.type == "DontCare":
        return Difficulty.IGNORED
    for level, (min_h, max_occ, max_trunc) in DIFFICULTY_LIMITS.items():
        if gt.height >= min_h and gt.occluded <= max_occ and gt.truncated <= max_trunc:
            return level
    return Difficulty.IGNORED


def gt_to_box(obj: KittiObject) -> ObjectBox3D:
    h, w, l = obj.dimensions
    x, y, z = obj.location
    return ObjectBox3D(Dimension3D(h, w, l), obj.rotation_y, (x, y - h / 2.0, z), obj.alpha)


def box_to_gt(box: ObjectBox3D, like: KittiObject | None = None, **fields) -> KittiObject:
    """Inverse of gt_to_box; non-geometric fields come from ``like`` / kwargs."""
    d = box.dim
    base = like or KittiObject("Car", 0.0, 0, 0.0, (0.0, 0.0, 0.0, 0.0), (0, 0, 0), (0, 0, 0), 0.0)
    return replace(
        base,
        alpha=box.alpha if box.alpha is not None else base.alpha,
        dimensions=(d.h, d.w, d.l),
        location=(float(box.T[0]), float(box.T[1] + d.h / 2.0), float(box.T[2])),
        rotation_y=box.theta,
        **fields,
    )
