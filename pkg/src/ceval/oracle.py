"""Reference values of c-Eval: closed form for affine models, radial search otherwise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attacks import Mask

__all__ = [
    "AffineInstance",
    "NoFlipFound",
    "oracle_ceval",
    "oracle_ceval_model",
    "oracle_ceval_box",
    "brute_force_ceval",
    "make_random_affine",
]


class NoFlipFound(RuntimeError):
    """Radial search found no label change within the search radius."""


@dataclass(frozen=True)
class AffineInstance:
    """Affine classifier ``W x + b`` (``W`` is ``m x n``) and a point ``x``."""

    W: np.ndarray
    b: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        for name in ("W", "b", "x"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        m, n = self.W.shape
        if self.b.shape != (m,) or self.x.reshape(-1).shape != (n,):
            raise ValueError("inconsistent affine instance shapes")

    @property
    def j0(self) -> int:
        return int(np.argmax(self.W @ self.x.reshape(-1) + self.b))

    @property
    def n(self) -> int:
        return self.W.shape[1]

    @property
    def m(self) -> int:
        return self.W.shape[0]

    def margins(self) -> np.ndarray:
        """``(w_j0 - w_j) . x + (b_j0 - b_j)`` for every class (0 at ``j0``)."""
        z = self.W @ self.x.reshape(-1) + self.b
        return z[self.j0] - z

    def to_model(self):
        from .models import AffineClassifier

        return AffineClassifier.from_params(self.W, self.b, input_shape=self.x.shape)


def oracle_ceval(instance: AffineInstance, frozen: Mask) -> float:
    """Exact masked distance to the nearest decision hyperplane.

    ``min_j m_j / ||v_j||`` over competing classes, where ``v_j`` is the
    restriction of ``w_j - w_j0`` to free coordinates. The ``[0, 1]`` box is
    not imposed. Returns ``inf`` when no hyperplane is reachable.
    """
    free = frozen.free
    if not free.any():
        return math.inf
    j0 = instance.j0
    margins = instance.margins()
    best = math.inf
    for j in range(instance.m):
        if j == j0:
            continue
        v = (instance.W[j] - instance.W[j0])[free]
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            continue
        best = min(best, float(margins[j]) / norm)
    return best


def _halfspace_box_distance(v, margin, lo, hi):
    """Smallest ``||d||`` with ``v . d >= margin`` and ``lo <= d <= hi``.

    The minimizer is ``clip(t v, lo, hi)`` for the smallest feasible ``t >= 0``;
    ``v . clip(t v, lo, hi)`` is piecewise linear in ``t`` so ``t`` is exact.
    """
    if margin <= 0:
        return 0.0
    nz = v != 0
    v, lo, hi = v[nz], lo[nz], hi[nz]
    if v.size == 0:
        return math.inf
    bound = np.where(v > 0, hi, lo)
    if float(v @ bound) < margin:
        return math.inf
    breaks = bound / v
    order = np.argsort(breaks)
    active_sq = float(v @ v)
    saturated = 0.0
    for i in order:
        t_end = breaks[i]
        if saturated + t_end * active_sq >= margin:
            break
        saturated += v[i] * bound[i]
        active_sq -= v[i] * v[i]
    t = (margin - saturated) / active_sq
    d = np.clip(t * v, lo, hi)
    return float(np.linalg.norm(d))


def oracle_ceval_box(instance: AffineInstance, frozen: Mask) -> float:
    """Exact masked c-Eval of an affine model with the ``[0, 1]^n`` box imposed.

    Same as :func:`oracle_ceval` except each half-space projection is also
    constrained to the box, which is the problem box-respecting attacks solve.
    """
    free = frozen.free
    if not free.any():
        return math.inf
    x = instance.x.reshape(-1)
    j0 = instance.j0
    margins = instance.margins()
    best = math.inf
    for j in range(instance.m):
        if j == j0:
            continue
        v = (instance.W[j] - instance.W[j0])[free]
        best = min(best, _halfspace_box_distance(v, float(margins[j]), -x[free], 1.0 - x[free]))
    return best


def oracle_ceval_model(model, x, frozen: Mask) -> float:
    """:func:`oracle_ceval` for a fitted :class:`~ceval.models.AffineClassifier`."""
    if getattr(model, "architecture", None) != "affine":
        raise ValueError("the oracle backend needs an affine model")
    inst = AffineInstance(model.coef_, model.intercept_, np.asarray(x, dtype=np.float64).reshape(-1))
    return oracle_ceval(inst, frozen)


def make_random_affine(n: int, m: int, seed: int = 0, low: float = 0.0,
                       high: float = 1.0) -> AffineInstance:
    """Gaussian ``W`` and ``b``; ``x`` uniform in ``[low, high]^n``."""
    if n < 2 or m < 2:
        raise ValueError("need n >= 2 features and m >= 2 classes")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    x = rng.uniform(low, high, size=n)
    return AffineInstance(W, b, x)


def _unit_directions(rng, k, samples):
    dirs = rng.standard_normal((samples, k))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    axes = np.concatenate([np.eye(k), -np.eye(k)])
    return np.concatenate([axes, dirs])


def brute_force_ceval(model, x, frozen: Mask, radius_max: float = 2.0,
                      samples: int | None = None, *, grid: int = 64,
                      bisect_steps: int = 40, seed: int = 0) -> float:
    """Sampled upper bound on c-Eval by radial search.

    For unit directions in the free subspace (all axis directions plus
    ``samples`` random ones), scan radii up to ``radius_max`` (shortened so
    the ray stays in ``[0, 1]^n``), then bisect the first flip. Intended for
    up to three free features; pass ``samples`` explicitly to go higher.
    """
    free = frozen.free
    k = int(free.sum())
    if k == 0:
        raise NoFlipFound("all features frozen")
    if k > 3 and samples is None:
        raise ValueError("more than 3 free features; pass samples explicitly")
    samples = 10_000 if samples is None else samples
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    l0 = int(np.argmax(model.decision_function(flat)[0]))
    rng = np.random.default_rng(seed)
    dirs_free = _unit_directions(rng, k, samples)
    dirs = np.zeros((len(dirs_free), flat.size))
    dirs[:, free] = dirs_free

    # largest t with x + t d inside the box
    with np.errstate(divide="ignore", invalid="ignore"):
        to_upper = np.where(dirs > 0, (1.0 - flat) / dirs, np.inf)
        to_lower = np.where(dirs < 0, -flat / dirs, np.inf)
    t_box = np.minimum(np.minimum(to_upper, to_lower).min(axis=1), radius_max)

    def flips(points):
        out = np.empty(len(points), dtype=bool)
        for s in range(0, len(points), 20000):
            out[s:s + 20000] = model.predict(points[s:s + 20000]) != l0
        return out

    fractions = np.linspace(0.0, 1.0, grid + 1)[1:]
    ts = t_box[:, None] * fractions[None, :]
    pts = flat[None, None, :] + ts[..., None] * dirs[:, None, :]
    hit = flips(pts.reshape(-1, flat.size)).reshape(len(dirs), grid)
    any_hit = hit.any(axis=1)
    if not any_hit.any():
        raise NoFlipFound(f"no flip within radius {radius_max}")
    first = hit.argmax(axis=1)
    idx = np.flatnonzero(any_hit)
    hi = ts[idx, first[idx]]
    lo = np.where(first[idx] > 0, ts[idx, np.maximum(first[idx] - 1, 0)], 0.0)
    d = dirs[idx]
    for _ in range(bisect_steps):
        mid = 0.5 * (lo + hi)
        f = flips(flat[None] + mid[:, None] * d)
        hi = np.where(f, mid, hi)
        lo = np.where(f, lo, mid)
    return float(hi.min())
