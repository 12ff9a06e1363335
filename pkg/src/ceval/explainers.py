"""Feature-importance explainers and their conversion to fixed-size explanations.

Importance weights are non-negative magnitudes used for ranking; signed
attributions, where an explainer has them, are kept in ``params["signed"]``.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ImportanceMap",
    "Explanation",
    "SegmentMap",
    "ExplainerSpec",
    "explain_gradient",
    "explain_grad_times_input",
    "explain_integrated_gradients",
    "explain_lime",
    "explain_dummy",
    "top_k",
    "top_segments_within",
    "aggregate_to_segments",
    "grid_segment",
    "budget",
    "parse_explainer",
    "write_importance_csv",
    "read_importance_csv",
    "write_explanation_json",
]

LIME_FILL = 0.5
DUMMY_KINDS = ("center_square", "random", "border")


@dataclass
class ImportanceMap:
    """One non-negative weight per input feature."""

    weights: np.ndarray
    explainer_id: str = "unknown"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("importance weights must be finite")

    @property
    def n(self) -> int:
        return self.weights.size

    @property
    def shape(self) -> tuple[int, ...]:
        return self.weights.shape


@dataclass(frozen=True)
class SegmentMap:
    """Segment id per feature, laid out like the input."""

    assignment: np.ndarray
    num_segments: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        if a.size and (a.min() < 0 or a.max() >= self.num_segments):
            raise ValueError("segment ids must lie in [0, num_segments)")

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment.reshape(-1), minlength=self.num_segments)

    def members(self, segment: int) -> np.ndarray:
        return np.flatnonzero(self.assignment.reshape(-1) == segment)


@dataclass(frozen=True)
class Explanation:
    """Explanatory feature indices of the flattened input, most important first."""

    feature_indices: np.ndarray
    n_features: int
    source: str = "unknown"
    granularity: str = "pixel"
    segmentation: SegmentMap | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = np.asarray(self.feature_indices, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "feature_indices", idx)
        if idx.size > self.n_features:
            raise ValueError("explanation larger than the input")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_features):
            raise ValueError("feature index out of range")
        if np.unique(idx).size != idx.size:
            raise ValueError("duplicate feature indices")
        if self.granularity not in ("pixel", "segment"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def k(self) -> int:
        return int(self.feature_indices.size)

    @property
    def is_full(self) -> bool:
        return self.k == self.n_features

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "indices": self.feature_indices.tolist(),
            "source": self.source,
            "granularity": self.granularity,
        }


def budget(n: int, fraction: float = 0.1) -> int:
    """Explanation size ``ceil(fraction * n)``."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    # round first so that e.g. 0.1 * 780 does not ceil to 79 through float error
    return int(math.ceil(round(fraction * n, 9)))


# ------------------------------------------------------------- explainers
def _predicted(model, x):
    z = model.decision_function(x)[0]
    return int(np.argmax(z)), z


def _logit_gradient(model, X, label):
    X = np.asarray(X, dtype=np.float64)
    seed = np.zeros((len(X), int(model.num_classes)))
    seed[:, label] = 1.0
    z, grad = model.input_gradient(X, seed)
    return z, grad.reshape(X.shape)


def explain_gradient(model, x) -> ImportanceMap:
    """``|d logit_l / dx|`` for the predicted label ``l``."""
    x = np.asarray(x, dtype=np.float64)
    label, _ = _predicted(model, x)
    _, grad = _logit_gradient(model, x[None], label)
    grad = grad[0]
    return ImportanceMap(np.abs(grad), "gradient", {"label": label, "signed": grad})


def explain_grad_times_input(model, x) -> ImportanceMap:
    """``|x * d logit_l / dx|``."""
    x = np.asarray(x, dtype=np.float64)
    label, _ = _predicted(model, x)
    _, grad = _logit_gradient(model, x[None], label)
    signed = x * grad[0]
    return ImportanceMap(np.abs(signed), "gradxinput", {"label": label, "signed": signed})


def explain_integrated_gradients(model, x, baseline=None, steps: int = 10) -> ImportanceMap:
    """Right Riemann sum of the path integral from ``baseline`` to ``x``.

    The baseline defaults to the all-zeros image.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if baseline.shape != x.shape:
        raise ValueError(f"baseline shape {baseline.shape} differs from input {x.shape}")
    label, _ = _predicted(model, x)
    alphas = np.arange(1, steps + 1, dtype=np.float64) / steps
    path = baseline[None] + alphas.reshape((-1,) + (1,) * x.ndim) * (x - baseline)[None]
    _, grads = _logit_gradient(model, path, label)
    signed = (x - baseline) * grads.mean(axis=0)
    return ImportanceMap(np.abs(signed), f"ig:{steps}",
                         {"label": label, "steps": steps, "signed": signed})


def _lime_masks(num_samples, num_segments, seed):
    # one row per draw, so a longer run with the same seed extends a shorter one
    masks = np.random.default_rng(seed).random((num_samples, num_segments)) < 0.5
    masks[0] = True
    return masks


def _lime_kernel(masks, width):
    on = masks.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosine = on / (np.sqrt(on) * math.sqrt(masks.shape[1]))
    distance = 1.0 - np.nan_to_num(cosine, nan=0.0)
    return np.exp(-(distance ** 2) / width ** 2)


def lime_perturb(x, segmentation: SegmentMap, masks, fill: float = LIME_FILL) -> np.ndarray:
    """Images where segments switched off in ``masks`` are replaced by ``fill``."""
    x = np.asarray(x, dtype=np.float64)
    keep = masks[:, segmentation.assignment.reshape(-1)].reshape((len(masks),) + x.shape)
    return np.where(keep, x[None], fill)


def explain_lime(model, x, segmentation: SegmentMap, num_samples: int = 1000, seed: int = 0,
                 *, kernel_width: float | None = None, fill: float = LIME_FILL,
                 batch_size: int = 500) -> ImportanceMap:
    """Weighted ridge surrogate over random binary segment masks.

    The response is the predicted probability of the model's label on ``x``.
    Each segment's coefficient is broadcast to its features. ``params`` keeps
    the signed coefficients, intercept and weighted training R^2.
    """
    from sklearn.linear_model import Ridge

    S = segmentation.num_segments
    if num_samples < S:
        raise ValueError(f"num_samples={num_samples} is below num_segments={S}")
    x = np.asarray(x, dtype=np.float64)
    if segmentation.assignment.shape != x.shape:
        raise ValueError("segmentation does not match the input shape")
    label, _ = _predicted(model, x)
    width = 0.25 * math.sqrt(S) if kernel_width is None else kernel_width
    masks = _lime_masks(num_samples, S, seed)
    response = np.empty(num_samples)
    for start in range(0, num_samples, batch_size):
        chunk = lime_perturb(x, segmentation, masks[start:start + batch_size], fill)
        response[start:start + batch_size] = model.predict_proba(chunk)[:, label]
    weights = _lime_kernel(masks, width)
    ridge = Ridge(alpha=1.0)
    ridge.fit(masks.astype(np.float64), response, sample_weight=weights)
    coef = ridge.coef_
    assert np.all(np.isfinite(coef)), "ridge surrogate produced non-finite coefficients"
    signed = coef[segmentation.assignment]
    params = {
        "label": label,
        "num_samples": num_samples,
        "seed": seed,
        "kernel_width": width,
        "coef": coef,
        "intercept": float(ridge.intercept_),
        "score": float(ridge.score(masks.astype(np.float64), response, sample_weight=weights)),
        "segmentation": segmentation,
        "signed": signed,
    }
    return ImportanceMap(np.abs(signed), f"lime:{num_samples}", params)


def explain_dummy(shape, kind: str = "center_square", *, fraction: float = 0.1,
                  seed: int = 0) -> ImportanceMap:
    """Explainer-free masks: weight 1 inside a fixed region, 0 outside.

    ``center_square`` marks the smallest centred square holding at least
    ``fraction`` of the pixels, ``border`` the thinnest frame holding at least
    that many. ``random`` draws i.i.d. uniform weights. Regions span all
    channels of a ``(C, H, W)`` shape.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if kind not in DUMMY_KINDS:
        raise ValueError(f"unknown dummy kind {kind!r}; choose from {DUMMY_KINDS}")
    if kind == "random":
        weights = np.random.default_rng(seed).random(shape)
        return ImportanceMap(weights, "dummy-random", {"seed": seed})
    H, W = (shape[-2], shape[-1]) if len(shape) >= 2 else (1, shape[0])
    k = budget(H * W, fraction)
    region = np.zeros((H, W), dtype=bool)
    if kind == "center_square":
        side = min(max(H, W), math.ceil(math.sqrt(k)))
        sh, sw = min(side, H), min(side, W)
        top, left = (H - sh) // 2, (W - sw) // 2
        region[top:top + sh, left:left + sw] = True
    else:
        for width in range(1, max(H, W)):
            region[:] = True
            region[width:H - width, width:W - width] = False
            if region.sum() >= k:
                break
    weights = np.broadcast_to(region.reshape(shape[-2:] if len(shape) >= 2 else shape),
                              shape).astype(np.float64)
    return ImportanceMap(weights, f"dummy-{kind.replace('_square', '')}", {"fraction": fraction})


# ----------------------------------------------------------- explanations
def top_k(importance: ImportanceMap, k: int) -> Explanation:
    """The ``k`` highest-weight features; ties go to the lowest index."""
    n = importance.n
    if k < 0 or k > n:
        raise ValueError(f"k={k} outside [0, {n}]")
    order = np.argsort(-importance.weights.reshape(-1), kind="stable")
    return Explanation(order[:k], n, importance.explainer_id, "pixel")


def _segment_order(importance: ImportanceMap, seg: SegmentMap):
    if seg.assignment.shape != importance.shape:
        raise ValueError("segmentation does not match the importance map")
    sums = np.bincount(seg.assignment.reshape(-1), weights=importance.weights.reshape(-1),
                       minlength=seg.num_segments)
    return np.argsort(-sums, kind="stable"), sums


def _segments_explanation(importance, seg, chosen, **metadata):
    flat = seg.assignment.reshape(-1)
    parts = [np.flatnonzero(flat == s) for s in chosen]
    idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    metadata["segments"] = [int(s) for s in chosen]
    return Explanation(idx, importance.n, importance.explainer_id, "segment", seg, metadata)


def aggregate_to_segments(importance: ImportanceMap, seg: SegmentMap,
                          k_segments: int) -> Explanation:
    """All features of the ``k_segments`` segments with the largest weight sums."""
    if k_segments < 0 or k_segments > seg.num_segments:
        raise ValueError(f"k_segments={k_segments} outside [0, {seg.num_segments}]")
    order, _ = _segment_order(importance, seg)
    return _segments_explanation(importance, seg, order[:k_segments])


def top_segments_within(importance: ImportanceMap, seg: SegmentMap, k: int) -> Explanation:
    """Longest prefix of the segment ranking whose feature count stays ``<= k``.

    The achieved count is recorded as ``metadata["achieved"]``.
    """
    if k < 0 or k > importance.n:
        raise ValueError(f"k={k} outside [0, {importance.n}]")
    order, _ = _segment_order(importance, seg)
    sizes = seg.sizes()
    total, chosen = 0, []
    for s in order:
        if total + sizes[s] > k:
            break
        total += int(sizes[s])
        chosen.append(s)
    return _segments_explanation(importance, seg, chosen, requested=k, achieved=total)


def grid_segment(input_shape, grid) -> SegmentMap:
    """Rectangular tiling of the last two axes; the last tile absorbs remainders."""
    shape = tuple(int(s) for s in np.atleast_1d(input_shape))
    rows, cols = (int(g) for g in grid)
    if rows < 1 or cols < 1:
        raise ValueError("grid extents must be >= 1")
    H, W = (shape[-2], shape[-1]) if len(shape) >= 2 else (1, shape[0])
    if rows > H or cols > W:
        raise ValueError(f"grid {rows}x{cols} larger than image {H}x{W}")
    r = np.minimum(np.arange(H) // (H // rows), rows - 1)
    c = np.minimum(np.arange(W) // (W // cols), cols - 1)
    ids = r[:, None] * cols + c[None, :]
    ids = ids.reshape(shape[-2:] if len(shape) >= 2 else shape)
    return SegmentMap(np.broadcast_to(ids, shape).copy(), rows * cols)


# ------------------------------------------------------ explainer strings
@dataclass(frozen=True)
class ExplainerSpec:
    """A parsed explainer name such as ``ig:5`` or ``lime:samples=200``.

    LIME explanations select whole segments (see :func:`top_segments_within`);
    every other explainer selects pixels with :func:`top_k`.
    """

    kind: str
    steps: int = 10
    samples: int = 1000
    grid: tuple[int, int] = (7, 7)
    seed: int = 0
    label: str = ""

    @property
    def name(self) -> str:
        return self.label or self.kind

    def importance(self, model, x, seed: int | None = None) -> ImportanceMap:
        seed = self.seed if seed is None else seed
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "gradient":
            return explain_gradient(model, x)
        if self.kind == "gradxinput":
            return explain_grad_times_input(model, x)
        if self.kind == "ig":
            return explain_integrated_gradients(model, x, steps=self.steps)
        if self.kind == "lime":
            return explain_lime(model, x, grid_segment(x.shape, self.grid), self.samples, seed)
        return explain_dummy(x.shape, self.kind.removeprefix("dummy-").replace(
            "center", "center_square"), seed=seed)

    def explanation(self, model, x, k: int, seed: int | None = None,
                    importance: ImportanceMap | None = None) -> Explanation:
        imp = importance if importance is not None else self.importance(model, x, seed)
        if self.kind == "lime":
            return top_segments_within(imp, imp.params["segmentation"], k)
        return top_k(imp, k)


def parse_explainer(text: str) -> list[ExplainerSpec]:
    """Parse an explainer name; a comma-list of LIME sample counts gives several.

    Accepted forms: ``gradient``, ``gradxinput``, ``ig``, ``ig:<steps>``,
    ``lime``, ``lime:samples=<n>[,<n>...][;grid=<r>x<c>]``, ``dummy-center``,
    ``dummy-random``, ``dummy-border``.
    """
    text = text.strip()
    aliases = {"grad": "gradient", "gradient-x-input": "gradxinput"}
    if text in aliases:
        text = aliases[text]
    if text in ("gradient", "gradxinput", "dummy-center", "dummy-random", "dummy-border"):
        return [ExplainerSpec(text, label=text)]
    m = re.fullmatch(r"ig(?::(\d+))?", text)
    if m:
        steps = int(m.group(1) or 10)
        if steps < 1:
            raise ValueError("ig steps must be >= 1")
        return [ExplainerSpec("ig", steps=steps, label=f"ig:{steps}")]
    m = re.fullmatch(r"lime(?::(.*))?", text)
    if m:
        samples, grid = [1000], (7, 7)
        for part in filter(None, (m.group(1) or "").split(";")):
            key, _, value = part.partition("=")
            if key == "samples":
                samples = [int(v) for v in value.split(",")]
            elif key == "grid":
                grid = tuple(int(v) for v in value.lower().split("x"))
                if len(grid) != 2:
                    raise ValueError(f"bad LIME grid {value!r}")
            else:
                raise ValueError(f"unknown LIME option {key!r}")
        return [ExplainerSpec("lime", samples=s, grid=grid, label=f"lime:{s}") for s in samples]
    raise ValueError(f"unknown explainer {text!r}")


# ---------------------------------------------------------------- export
def write_importance_csv(importance: ImportanceMap, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature_index", "weight"])
        for i, w in enumerate(importance.weights.reshape(-1)):
            writer.writerow([i, repr(float(w))])


def read_importance_csv(path, shape=None) -> ImportanceMap:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    idx = np.array([int(r["feature_index"]) for r in rows])
    if not np.array_equal(idx, np.arange(len(idx))):
        raise ValueError(f"{path}: feature_index column must be 0..n-1 in order")
    weights = np.array([float(r["weight"]) for r in rows])
    return ImportanceMap(weights if shape is None else weights.reshape(shape), "csv",
                         {"path": str(path)})


def write_explanation_json(explanation: Explanation, path) -> None:
    with open(path, "w") as fh:
        json.dump(explanation.to_dict(), fh)
