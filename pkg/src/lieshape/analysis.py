"""Post-training analysis and renderings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .lie import CoordinateFrame, FlowParams
from .objectives import LossWeights, objective_T, objective_P, pattern_areas
from .scene import ModelState, composite_maps, pattern_primitives, pattern_weights, reconstruct

TAU_P = 0.05
TAU_ID = 0.1
TRANSLATION_RATIO = 0.1


def count_active_patterns(weights, X0, tau_p: float = TAU_P):
    if not 0.0 < tau_p < 1.0:
        raise ValueError("tau_p must lie in (0, 1)")
    Q = pattern_areas(weights, X0)
    return int(np.sum(Q > tau_p)), Q


def _magnitude(flow: FlowParams):
    return float(np.linalg.norm(flow.A) + np.linalg.norm(flow.b))


def classify_transformers(flows, tau_id: float = TAU_ID):
    """'identity' when ‖A‖_F + ‖b‖ < tau_id, else 'active'."""
    if tau_id <= 0:
        raise ValueError("tau_id must be positive")
    return ["identity" if _magnitude(f) < tau_id else "active" for f in flows]


@dataclass
class DirectionReport:
    directions: dict[int, list]  # k -> unit b
    purity: dict[int, float]  # ‖b‖ / (‖b‖ + ‖A‖_F)
    translational: dict[int, bool]  # ‖A‖_F < 0.1 ‖b‖
    independence: dict[tuple, float]  # (i, j) -> |det[b̂_i b̂_j]|
    non_translational: list[int] = field(default_factory=list)


def direction_analysis(flows: dict[int, FlowParams]) -> DirectionReport:
    """Dominant direction of each transformer and pairwise independence.

    ``flows`` maps transformer index to parameters (usually only actives).
    """
    if not flows:
        raise ValueError("direction analysis needs at least one transformer")
    report = DirectionReport({}, {}, {}, {})
    for k, f in flows.items():
        nb = float(np.linalg.norm(f.b))
        na = float(np.linalg.norm(f.A))
        if nb < 1e-9:
            report.non_translational.append(k)
            continue
        report.directions[k] = (f.b / nb).tolist()
        report.purity[k] = nb / (nb + na)
        report.translational[k] = na < TRANSLATION_RATIO * nb
    keys = sorted(report.directions)
    for a_pos, i in enumerate(keys):
        for j in keys[a_pos + 1 :]:
            di, dj = np.array(report.directions[i]), np.array(report.directions[j])
            report.independence[(i, j)] = float(abs(di[0] * dj[1] - di[1] * dj[0]))
    return report


# -- ground-truth comparison ---------------------------------------------------


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def masked_frame_mse(X, Y):
    """Per-frame mean of (X_i − Y_i X_i)² over pixels where X_i > 0, i ≥ 1."""
    out = []
    for x, y in zip(X[1:], Y[1:]):
        support = x > 0
        out.append(float(np.mean((x[support] - y[support] * x[support]) ** 2)) if support.any() else 0.0)
    return out


def match_patterns(patterns, masks, active):
    """Greedy best-IoU assignment of ground-truth objects to active patterns.

    Returns {object index: (pattern index, IoU)}.
    """
    supports = {l: patterns[l] > 0.5 for l in active}
    scores = sorted(
        ((iou(supports[l], m), j, l) for j, m in enumerate(masks) for l in active),
        reverse=True,
    )
    used_l, out = set(), {}
    for score, j, l in scores:
        if j in out or l in used_l:
            continue
        out[j] = (l, score)
        used_l.add(l)
    return out


def displacement_errors(state: ModelState, dataset: Dataset, assignment):
    """Worst error, in pixel pitches, of each object's centroid track."""
    frame = CoordinateFrame(*dataset.frames.shape[1:])
    px, py = frame.pitch
    maps = composite_maps(state)
    errors = {}
    for j, obj in enumerate(dataset.objects):
        if j not in assignment:
            continue
        l = assignment[j][0]
        rows, cols = np.array(obj["pixels"], dtype=float).T
        c0 = np.array([cols.mean() * px - 1.0, rows.mean() * py - 1.0])
        worst = 0.0
        for i, (dr, dc) in enumerate(obj["displacement"]):
            truth = c0 + np.array([dc * px, dr * py])
            pred = maps[l][i].apply(c0)
            err = np.abs(pred - truth) / np.array([px, py])
            worst = max(worst, float(err.max()))
        errors[j] = worst
    return errors


@dataclass
class EvalReport:
    active_pattern_count: int
    pattern_areas: list
    transformer_classes: list
    directions: dict
    translation_purity: dict
    residual_A: dict
    independence: dict
    non_translational: list
    losses: dict
    masked_frame_mse: list = field(default_factory=list)
    pattern_iou: dict = field(default_factory=dict)
    displacement_error_px: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["independence"] = {f"{i}-{j}": v for (i, j), v in self.independence.items()}
        return d


def evaluate(
    state: ModelState,
    dataset: Dataset,
    weights: LossWeights | None = None,
    tau_p: float = TAU_P,
    tau_id: float = TAU_ID,
) -> EvalReport:
    X = dataset.frames
    state.check_against(X)
    weights = weights or LossWeights()
    W = pattern_weights(state.logits)
    count, Q = count_active_patterns(W, X[0], tau_p)
    classes = classify_transformers(state.flows, tau_id)
    active_flows = {k: f for k, f in enumerate(state.flows) if classes[k] == "active"}
    if active_flows:
        dirs = direction_analysis(active_flows)
    else:
        dirs = DirectionReport({}, {}, {}, {})
    _, rep_T, _ = objective_T(X, state, weights)
    _, rep_P, _ = objective_P(X, state, weights)
    losses = rep_T.as_dict()
    losses.update({k: getattr(rep_P, k) for k in ("recon_P", "entropy", "total_P")})
    Y = reconstruct(state, X[0])
    report = EvalReport(
        active_pattern_count=count,
        pattern_areas=Q.tolist(),
        transformer_classes=classes,
        directions=dirs.directions,
        translation_purity=dirs.purity,
        residual_A={k: float(np.linalg.norm(f.A)) for k, f in active_flows.items()},
        independence=dirs.independence,
        non_translational=dirs.non_translational,
        losses=losses,
        masked_frame_mse=masked_frame_mse(X, Y),
    )
    if dataset.objects:
        patterns = pattern_primitives(X[0], W)
        active = [l for l in range(state.L) if Q[l] > tau_p]
        assignment = match_patterns(patterns, dataset.object_masks(0), active)
        report.pattern_iou = {j: {"pattern": l, "iou": s} for j, (l, s) in assignment.items()}
        report.displacement_error_px = displacement_errors(state, dataset, assignment)
    return report


# -- renderings ----------------------------------------------------------------


def field_records(flow: FlowParams, density: int = 9):
    """Vector A[x, y]ᵀ + b on a density × density grid over [-1, 1]²."""
    if density < 2:
        raise ValueError("grid density must be at least 2")
    pts = np.linspace(-1.0, 1.0, density)
    records = []
    for y in pts:
        for x in pts:
            v = flow.A @ np.array([x, y]) + flow.b
            records.append({"x": float(x), "y": float(y), "vx": float(v[0]), "vy": float(v[1])})
    return records


def field_svg(records, size: int = 300, color: str = "#1f4fbf") -> str:
    """Arrow drawing with y pointing down; arrows scaled to the largest vector."""
    density = int(round(np.sqrt(len(records))))
    spacing = size / (density + 1)
    mags = [np.hypot(r["vx"], r["vy"]) for r in records]
    peak = max(mags, default=0.0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white" stroke="black"/>',
    ]
    if peak > 0:
        scale = 0.8 * spacing / peak
        for r in records:
            x0 = (r["x"] + 1) / 2 * (size - 2 * spacing) + spacing
            y0 = (r["y"] + 1) / 2 * (size - 2 * spacing) + spacing
            x1 = x0 + r["vx"] * scale
            y1 = y0 + r["vy"] * scale
            if np.hypot(x1 - x0, y1 - y0) < 1e-6:
                continue
            ang = np.arctan2(y1 - y0, x1 - x0)
            head = 0.25 * np.hypot(x1 - x0, y1 - y0)
            hx1, hy1 = x1 - head * np.cos(ang - 0.4), y1 - head * np.sin(ang - 0.4)
            hx2, hy2 = x1 - head * np.cos(ang + 0.4), y1 - head * np.sin(ang + 0.4)
            parts.append(
                f'<path d="M{x0:.2f},{y0:.2f} L{x1:.2f},{y1:.2f} M{hx1:.2f},{hy1:.2f} '
                f'L{x1:.2f},{y1:.2f} L{hx2:.2f},{hy2:.2f}" stroke="{color}" fill="none"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts)


def render_field(flow: FlowParams, density: int = 9):
    records = field_records(flow, density)
    return records, field_svg(records)


def render_sequence(images, threshold: bool = False) -> np.ndarray:
    """Horizontal 8-bit strip with 1-pixel black separators."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("need at least one image")
    h, w = images[0].shape
    if any(im.shape != (h, w) for im in images):
        raise ValueError("images must share dimensions")
    strip = np.zeros((h, len(images) * (w + 1) - 1), dtype=np.uint8)
    for n, im in enumerate(images):
        vals = (im >= 0.5).astype(float) if threshold else np.clip(im, 0.0, 1.0)
        strip[:, n * (w + 1) : n * (w + 1) + w] = np.rint(vals * 255).astype(np.uint8)
    return strip


def write_pgm(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary graymap")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_field_export(directory, k, flow, density=9):
    directory = Path(directory)
    records, svg = render_field(flow, density)
    (directory / f"field_T{k}.json").write_text(json.dumps(records))
    (directory / f"field_T{k}.svg").write_text(svg)
    return directory / f"field_T{k}.json", directory / f"field_T{k}.svg"
