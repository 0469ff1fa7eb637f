"""Synthetic sequences of glyphs translated by whole pixels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GLYPHS = {
    "X": [
        "#...#",
        ".#.#.",
        "..#..",
        ".#.#.",
        "#...#",
    ],
    "O": [
        ".###.",
        "#...#",
        "#...#",
        "#...#",
        ".###.",
    ],
    "Y": [
        "#...#",
        ".#.#.",
        "..#..",
        "..#..",
        "..#..",
    ],
}


class SceneSpecError(ValueError):
    pass


def glyph_bitmap(glyph) -> np.ndarray:
    if isinstance(glyph, str):
        if glyph not in GLYPHS:
            raise SceneSpecError(f"unknown glyph {glyph!r}; choose from {sorted(GLYPHS)} or give a bitmap")
        return np.array([[c == "#" for c in row] for row in GLYPHS[glyph]], dtype=np.float64)
    bitmap = np.asarray(glyph, dtype=np.float64)
    if bitmap.ndim != 2 or not np.any(bitmap > 0):
        raise SceneSpecError("custom glyph must be a non-empty 2-D bitmap")
    return (bitmap > 0).astype(np.float64)


@dataclass
class SceneObject:
    glyph: object  # "X" | "O" | "Y" | 2-D bitmap
    start: tuple[int, int]  # top-left (row, col) of the bitmap in frame 0
    step: tuple[int, int] = (0, 0)  # (drow, dcol) pixels per frame
    intensity: float = 1.0

    def label(self):
        return self.glyph if isinstance(self.glyph, str) else "custom"


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    H: int = 15
    W: int = 15
    frames: int = 8  # N + 1

    @classmethod
    def from_dict(cls, d):
        try:
            objects = [
                SceneObject(
                    glyph=o["glyph"],
                    start=tuple(int(v) for v in o["start"]),
                    step=tuple(int(v) for v in o.get("step", (0, 0))),
                    intensity=float(o.get("intensity", 1.0)),
                )
                for o in d["objects"]
            ]
            return cls(objects, int(d.get("H", 15)), int(d.get("W", 15)), int(d.get("frames", 8)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneSpecError(f"malformed scene spec: {exc}") from exc

    def to_dict(self):
        return {
            "H": self.H,
            "W": self.W,
            "frames": self.frames,
            "objects": [
                {
                    "glyph": o.glyph if isinstance(o.glyph, str) else np.asarray(o.glyph).tolist(),
                    "start": list(o.start),
                    "step": list(o.step),
                    "intensity": o.intensity,
                }
                for o in self.objects
            ],
        }


def two_object_spec() -> SceneSpec:
    """Two glyphs on 15x15 over 8 frames: "O" moves down, "X" moves right."""
    return SceneSpec(
        [
            SceneObject("O", (1, 1), (1, 0)),
            SceneObject("X", (10, 2), (0, 1)),
        ]
    )


def parallel_spec() -> SceneSpec:
    """Both glyphs move right at the same speed."""
    return SceneSpec(
        [
            SceneObject("X", (1, 1), (0, 1)),
            SceneObject("O", (9, 1), (0, 1)),
        ]
    )


@dataclass
class Dataset:
    frames: np.ndarray  # (N+1, H, W)
    objects: list[dict] = field(default_factory=list)

    def to_dict(self):
        n, h, w = self.frames.shape
        return {
            "dims": {"H": h, "W": w, "frames": n},
            "frames": [f.ravel().tolist() for f in self.frames],
            "ground_truth": {"objects": self.objects},
        }

    @classmethod
    def from_dict(cls, d):
        dims = d["dims"]
        frames = np.array(d["frames"], dtype=np.float64).reshape(dims["frames"], dims["H"], dims["W"])
        return cls(frames, d.get("ground_truth", {}).get("objects", []))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def object_masks(self, frame=0):
        """Boolean support of each ground-truth object in ``frame``."""
        _, h, w = self.frames.shape
        masks = []
        for obj in self.objects:
            m = np.zeros((h, w), dtype=bool)
            rows, cols = zip(*obj["pixels"]) if obj["pixels"] else ((), ())
            dr, dc = obj["displacement"][frame]
            m[np.array(rows, dtype=int) + dr, np.array(cols, dtype=int) + dc] = True
            masks.append(m)
        return masks


def generate_sequence(spec: SceneSpec) -> Dataset:
    """Render ``spec``; rejects out-of-bounds or overlapping objects per frame."""
    if spec.frames < 2:
        raise SceneSpecError("need at least 2 frames")
    if spec.H < 2 or spec.W < 2:
        raise SceneSpecError("frame must be at least 2x2")
    frames = np.zeros((spec.frames, spec.H, spec.W))
    bitmaps = [glyph_bitmap(o.glyph) for o in spec.objects]
    for o in spec.objects:
        if not 0.0 < o.intensity <= 1.0:
            raise SceneSpecError(f"object {o.label()}: intensity {o.intensity} outside (0, 1]")
    for i in range(spec.frames):
        owner = np.full((spec.H, spec.W), -1)
        for j, (o, bm) in enumerate(zip(spec.objects, bitmaps)):
            r0 = o.start[0] + i * o.step[0]
            c0 = o.start[1] + i * o.step[1]
            rr, cc = np.nonzero(bm)
            rr = rr + r0
            cc = cc + c0
            if rr.min() < 0 or cc.min() < 0 or rr.max() >= spec.H or cc.max() >= spec.W:
                raise SceneSpecError(f"frame {i}: object {j} ({o.label()}) leaves the {spec.H}x{spec.W} frame")
            clash = owner[rr, cc]
            if np.any(clash >= 0):
                other = int(clash[clash >= 0][0])
                raise SceneSpecError(
                    f"frame {i}: objects {other} ({spec.objects[other].label()}) and {j} ({o.label()}) overlap"
                )
            owner[rr, cc] = j
            frames[i, rr, cc] = o.intensity
    objects = []
    for j, (o, bm) in enumerate(zip(spec.objects, bitmaps)):
        rr, cc = np.nonzero(bm)
        objects.append(
            {
                "index": j,
                "glyph": o.label(),
                "pixels": [[int(r + o.start[0]), int(c + o.start[1])] for r, c in zip(rr, cc)],
                "displacement": [[i * o.step[0], i * o.step[1]] for i in range(spec.frames)],
            }
        )
    return Dataset(frames, objects)
