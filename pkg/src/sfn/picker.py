"""Particle pickers: thresholding on i.i.d. candidates, greedy micrograph
picking on correlation maps, and a random baseline.

Scores are raw inner products with unit-norm templates, so a threshold T is
in units of the noise deviation. Micrograph picking treats the canvas as
periodic: correlation, patch extraction, and the overlap mask all wrap.
"""

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ShapeError
from .noisegen import draw_positions
from .rng import STREAM_RANDOM_PICKS, generator
from .tensors import read_tensor, write_tensor

PICK_CHUNK_ELEMENTS = 1 << 22


def _window_indices(corner, side, dims):
    return tuple((c + np.arange(side)) % k for c, k in zip(corner, dims))


def _auto_source_id(canvas):
    return hashlib.blake2b(np.ascontiguousarray(canvas).tobytes(), digest_size=6).hexdigest()


@dataclass(frozen=True)
class PickSet:
    """Selected patches with their scores and provenance.

    positions (when present) are patch centers on the source canvas, and
    any two picks from the same source keep wrapped L-infinity distance of
    at least the patch side, so their boxes never overlap.
    """

    patches: np.ndarray
    scores: np.ndarray
    threshold: float
    labels: np.ndarray | None = None
    positions: np.ndarray | None = None
    canvas_dims: tuple | None = None
    source_ids: np.ndarray | None = None

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype=np.float64)
        if patches.ndim not in (3, 4):
            raise ShapeError("patches must be a stack of 2D or 3D arrays")
        if len(set(patches.shape[1:])) != 1:
            raise ShapeError(f"patches must be square or cubic, got {patches.shape[1:]}")
        count = patches.shape[0]
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.shape != (count,):
            raise ShapeError("scores must be one value per patch")
        if not np.all(np.isfinite(scores)):
            raise ArgumentError("scores contain non-finite values")
        if not np.all(scores >= self.threshold):
            raise ArgumentError("every pick score must be at least the threshold")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (count,):
                raise ShapeError("labels must be one value per patch")
        positions = self.positions
        if positions is not None:
            positions = np.asarray(positions, dtype=np.int64)
            if positions.shape != (count, patches.ndim - 1):
                raise ShapeError("positions must give one center per patch axis")
            if self.canvas_dims is None:
                raise ArgumentError("positions require canvas_dims")
        dims = None if self.canvas_dims is None else tuple(int(k) for k in self.canvas_dims)
        if dims is not None and len(dims) != patches.ndim - 1:
            raise ShapeError("canvas_dims rank does not match patches")
        source_ids = self.source_ids
        if source_ids is None:
            source_ids = np.array([""] * count, dtype=object)
        else:
            source_ids = np.array([str(s) for s in np.asarray(source_ids, dtype=object)], dtype=object)
            if source_ids.shape != (count,):
                raise ShapeError("source_ids must be one value per patch")
        if positions is not None:
            self._check_no_overlap(positions, patches.shape[1], dims, source_ids)
        for name, value in (
            ("patches", patches),
            ("scores", scores),
            ("labels", labels),
            ("positions", positions),
            ("canvas_dims", dims),
            ("source_ids", source_ids),
        ):
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @staticmethod
    def _check_no_overlap(positions, side, dims, source_ids):
        half = side // 2
        for source in dict.fromkeys(source_ids.tolist()):
            mask = np.zeros(dims, dtype=bool)
            rows = [i for i, s in enumerate(source_ids) if s == source]
            for i in rows:
                corner = (positions[i] - half) % np.asarray(dims)
                window = _window_indices(corner, side, dims)
                block = mask[np.ix_(*window)]
                if block.any():
                    raise ArgumentError(
                        f"picks overlap within source {source!r} near center {tuple(positions[i])}"
                    )
                mask[np.ix_(*window)] = True

    def __len__(self):
        return self.patches.shape[0]

    @property
    def side(self):
        return self.patches.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows)
        return PickSet(
            patches=self.patches[rows],
            scores=self.scores[rows],
            threshold=self.threshold,
            labels=None if self.labels is None else self.labels[rows],
            positions=None if self.positions is None else self.positions[rows],
            canvas_dims=self.canvas_dims,
            source_ids=self.source_ids[rows],
        )

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        if not sets:
            raise ArgumentError("nothing to concatenate")
        first = sets[0]
        for other in sets[1:]:
            if other.patches.shape[1:] != first.patches.shape[1:]:
                raise ShapeError("patch dims differ between pick sets")
            if other.threshold != first.threshold:
                raise ArgumentError("thresholds differ between pick sets")
            if (other.positions is None) != (first.positions is None):
                raise ArgumentError("cannot mix picks with and without positions")
            if (other.labels is None) != (first.labels is None):
                raise ArgumentError("cannot mix labeled and unlabeled picks")
            if other.canvas_dims != first.canvas_dims:
                raise ArgumentError("canvas dims differ between pick sets")
        return cls(
            patches=np.concatenate([s.patches for s in sets]),
            scores=np.concatenate([s.scores for s in sets]),
            threshold=first.threshold,
            labels=None if first.labels is None else np.concatenate([s.labels for s in sets]),
            positions=None if first.positions is None else np.concatenate([s.positions for s in sets]),
            canvas_dims=first.canvas_dims,
            source_ids=np.concatenate([s.source_ids for s in sets]),
        )


def pick_iid(candidates, template_set, threshold, source_id=""):
    """Keep every candidate whose best template correlation reaches the
    threshold (inclusive), preserving candidate order.

    Labels record the best template, ties broken toward the smaller index.
    """
    stack = np.asarray(candidates, dtype=np.float64)
    templates = template_set.templates
    if stack.ndim != templates.ndim or stack.shape[1:] != templates.shape[1:]:
        raise ShapeError(
            f"candidate dims {stack.shape[1:]} do not match template dims {templates.shape[1:]}"
        )
    flat_templates = templates.reshape(len(template_set), -1)
    width = flat_templates.shape[1]
    step = max(1, PICK_CHUNK_ELEMENTS // width)
    kept, scores, labels = [], [], []
    for start in range(0, stack.shape[0], step):
        chunk = stack[start:start + step].reshape(-1, width)
        dots = chunk @ flat_templates.T
        best = dots.max(axis=1)
        keep = best >= threshold
        if np.any(keep):
            kept.append(stack[start:start + step][keep])
            scores.append(best[keep])
            labels.append(np.argmax(dots[keep], axis=1))
    if kept:
        patches = np.concatenate(kept)
        scores = np.concatenate(scores)
        labels = np.concatenate(labels).astype(np.int64)
    else:
        patches = np.empty((0,) + templates.shape[1:])
        scores = np.empty(0)
        labels = np.empty(0, dtype=np.int64)
    return PickSet(
        patches=patches,
        scores=scores,
        threshold=float(threshold),
        labels=labels,
        source_ids=np.array([source_id] * len(scores), dtype=object),
    )


def correlation_map(canvas, template):
    """Circular cross-correlation scores indexed by patch center.

    Entry p is the inner product of the template with the wrapped patch
    whose center sits at p (corner at p - side//2 mod canvas dims).
    """
    canvas = np.asarray(canvas, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    if canvas.ndim != template.ndim:
        raise ShapeError("canvas and template rank differ")
    if any(k < d for k, d in zip(canvas.shape, template.shape)):
        raise ShapeError("canvas must be at least as large as the template")
    padded = np.zeros(canvas.shape)
    padded[tuple(slice(0, d) for d in template.shape)] = template
    axes = tuple(range(canvas.ndim))
    corner_scores = np.fft.irfftn(
        np.fft.rfftn(canvas) * np.conj(np.fft.rfftn(padded)), s=canvas.shape, axes=axes
    )
    shifts = [d // 2 for d in template.shape]
    return np.roll(corner_scores, shifts, axis=axes)


def pick_micrograph(field, template_set, threshold, source_id=None):
    """Greedy correlation picker over a full canvas.

    Builds the pixelwise best correlation over all templates, walks the
    pixels above the threshold (strict) in descending score order with ties
    broken by flattened index, and accepts each whose patch box does not
    touch an already accepted box. Boxes wrap at the borders.
    """
    canvas = np.asarray(getattr(field, "canvas", field), dtype=np.float64)
    templates = template_set.templates
    if canvas.ndim != templates.ndim - 1:
        raise ShapeError("canvas rank does not match template rank")
    side = template_set.side
    if any(k < side for k in canvas.shape):
        raise ShapeError("canvas must be at least as large as the templates")
    if source_id is None:
        source_id = _auto_source_id(canvas)

    best = None
    best_label = None
    for index, template in enumerate(template_set):
        scores = correlation_map(canvas, template)
        if best is None:
            best = scores
            best_label = np.zeros(canvas.shape, dtype=np.int64)
        else:
            improved = scores > best
            best[improved] = scores[improved]
            best_label[improved] = index

    flat = np.flatnonzero(best > threshold)
    order = np.argsort(-best.reshape(-1)[flat], kind="stable")
    dims = canvas.shape
    half = side // 2
    mask = np.zeros(dims, dtype=bool)
    picked, pick_scores, pick_labels, centers = [], [], [], []
    for flat_index in flat[order]:
        center = np.unravel_index(flat_index, dims)
        corner = tuple((c - half) % k for c, k in zip(center, dims))
        window = _window_indices(corner, side, dims)
        block = np.ix_(*window)
        if mask[block].any():
            continue
        mask[block] = True
        picked.append(canvas[block].copy())
        pick_scores.append(best[center])
        pick_labels.append(best_label[center])
        centers.append(center)

    if picked:
        patches = np.stack(picked)
        scores = np.asarray(pick_scores)
        labels = np.asarray(pick_labels, dtype=np.int64)
        positions = np.asarray(centers, dtype=np.int64)
    else:
        patches = np.empty((0,) + templates.shape[1:])
        scores = np.empty(0)
        labels = np.empty(0, dtype=np.int64)
        positions = np.empty((0, canvas.ndim), dtype=np.int64)
    return PickSet(
        patches=patches,
        scores=scores,
        threshold=float(threshold),
        labels=labels,
        positions=positions,
        canvas_dims=dims,
        source_ids=np.array([source_id] * len(scores), dtype=object),
    )


def pick_random(field, side, count, seed, source_id=None, budget=None):
    """Baseline that ignores content: uniform non-overlapping patches of
    the given side.

    Scores are recorded as zero and the threshold is minus infinity, so the
    score invariant is vacuous.
    """
    canvas = np.asarray(getattr(field, "canvas", field), dtype=np.float64)
    side = int(side)
    if side < 1:
        raise ArgumentError("patch side must be positive")
    if source_id is None:
        source_id = _auto_source_id(canvas)
    rng = generator(seed, STREAM_RANDOM_PICKS)
    if budget is None:
        positions = draw_positions(canvas.shape, side, count, rng)
    else:
        positions = draw_positions(canvas.shape, side, count, rng, budget=budget)
    half = side // 2
    patches = []
    for center in positions:
        corner = tuple((c - half) % k for c, k in zip(center, canvas.shape))
        patches.append(canvas[np.ix_(*_window_indices(corner, side, canvas.shape))].copy())
    if patches:
        stack = np.stack(patches)
    else:
        stack = np.empty((0,) + (side,) * canvas.ndim)
    return PickSet(
        patches=stack,
        scores=np.zeros(len(patches)),
        threshold=float("-inf"),
        positions=np.asarray(positions, dtype=np.int64).reshape(len(patches), canvas.ndim),
        canvas_dims=canvas.shape,
        source_ids=np.array([source_id] * len(patches), dtype=object),
    )


def label_subsets(picks, template_set, threshold):
    """Per-template subsets: patch i joins subset l when its inner product
    with template l reaches the threshold. Subsets may overlap."""
    if picks.patches.shape[1:] != template_set.templates.shape[1:]:
        raise ShapeError("patch dims do not match template dims")
    flat = picks.patches.reshape(len(picks), -1)
    subsets = []
    for template in template_set:
        dots = flat @ template.reshape(-1)
        rows = np.flatnonzero(dots >= threshold)
        subsets.append(
            PickSet(
                patches=picks.patches[rows],
                scores=picks.scores[rows],
                threshold=float(threshold),
                labels=None if picks.labels is None else picks.labels[rows],
                positions=None if picks.positions is None else picks.positions[rows],
                canvas_dims=picks.canvas_dims,
                source_ids=picks.source_ids[rows],
            )
        )
    return subsets


def save_picks(picks, directory, name="picks"):
    """Write the patch stack as one tensor file plus two CSV manifests."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(picks) > 0:
        write_tensor(directory / f"{name}.sfn", picks.patches)
    with open(directory / f"{name}.meta.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["key", "value"])
        writer.writerow(["count", len(picks)])
        writer.writerow(["threshold", "%.17g" % picks.threshold])
        writer.writerow(["patch_ndim", picks.patches.ndim - 1])
        writer.writerow(["patch_side", picks.side if len(picks) else 0])
        writer.writerow(["has_labels", int(picks.labels is not None)])
        writer.writerow(["has_positions", int(picks.positions is not None)])
        dims = picks.canvas_dims
        writer.writerow(["canvas_dims", "" if dims is None else "x".join(str(k) for k in dims)])
    with open(directory / f"{name}.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        axes = [] if picks.positions is None else [f"position{i}" for i in range(picks.positions.shape[1])]
        writer.writerow(["index", "score", "label"] + axes + ["source_id"])
        for i in range(len(picks)):
            label = -1 if picks.labels is None else picks.labels[i]
            row = [i, "%.17g" % picks.scores[i], label]
            if picks.positions is not None:
                row.extend(int(p) for p in picks.positions[i])
            row.append(picks.source_ids[i])
            writer.writerow(row)
    return directory / f"{name}.csv"


def load_picks(directory, name="picks"):
    directory = Path(directory)
    meta_path = directory / f"{name}.meta.csv"
    if not meta_path.is_file():
        raise ArgumentError(f"no pick metadata at {meta_path}")
    meta = {}
    with open(meta_path, newline="") as handle:
        for row in csv.DictReader(handle):
            meta[row["key"]] = row["value"]
    count = int(meta["count"])
    ndim = int(meta["patch_ndim"])
    side = int(meta["patch_side"])
    has_labels = bool(int(meta["has_labels"]))
    has_positions = bool(int(meta["has_positions"]))
    dims = meta["canvas_dims"]
    canvas_dims = tuple(int(k) for k in dims.split("x")) if dims else None
    if count > 0:
        patches = read_tensor(directory / f"{name}.sfn")
        if patches.shape[0] != count:
            raise ArgumentError("patch stack does not match recorded count")
    else:
        patches = np.empty((0,) + (max(side, 1),) * ndim)
    scores = np.empty(count)
    labels = np.empty(count, dtype=np.int64) if has_labels else None
    positions = np.empty((count, ndim), dtype=np.int64) if has_positions else None
    source_ids = np.empty(count, dtype=object)
    with open(directory / f"{name}.csv", newline="") as handle:
        for row in csv.DictReader(handle):
            i = int(row["index"])
            scores[i] = float(row["score"])
            if has_labels:
                labels[i] = int(row["label"])
            if has_positions:
                for axis in range(ndim):
                    positions[i, axis] = int(row[f"position{axis}"])
            source_ids[i] = row["source_id"]
    return PickSet(
        patches=patches,
        scores=scores,
        threshold=float(meta["threshold"]),
        labels=labels,
        positions=positions,
        canvas_dims=canvas_dims,
        source_ids=source_ids,
    )
