"""The c-Eval metric: raw and normalized scores, plots, the near-affine check, rankings."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import (AllFrozen, AttackConfig, AttackFailed, Mask, PerturbationResult,
                      attack_cw_batch, run_attack)
from .explainers import Explanation, ExplainerSpec, ImportanceMap, budget, top_k
from .oracle import oracle_ceval_model
from .parallel import parallel_map

__all__ = [
    "MetricUnavailable",
    "CEvalResult",
    "CEvalPlot",
    "NearAffineRow",
    "NearAffineReport",
    "RankRow",
    "c_values",
    "compute_ceval",
    "compute_normalized",
    "ceval_plot",
    "near_affine_check",
    "harmonic_estimate",
    "pearson",
    "rank_explainers",
    "write_ranking_csv",
    "write_plot_csv",
    "json_float",
]


class MetricUnavailable(RuntimeError):
    """The attack backend found no label-flipping perturbation."""


def json_float(value):
    """Floats for JSON: infinities become ``"inf"``/``"-inf"``, NaN becomes ``None``."""
    if value is None:
        return None
    value = float(value)
    if math.isnan(value):
        return None
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


@dataclass
class CEvalResult:
    c_value: float
    backend: str
    explanation: Explanation
    normalized: float | None = None
    c_empty: float | None = None
    perturbation: PerturbationResult | None = None

    def to_dict(self, include_delta: bool = False) -> dict:
        doc = {
            "c": json_float(self.c_value),
            "normalized": json_float(self.normalized),
            "c_empty": json_float(self.c_empty),
            "backend": self.backend,
            "explanation": self.explanation.to_dict(),
        }
        if self.perturbation is not None:
            doc["perturbation"] = self.perturbation.to_dict(include_delta)
        return doc


def c_values(model, x, masks: list[Mask], cfg: AttackConfig):
    """c-Eval for several masks of one input.

    Returns ``(c, result)`` per mask: ``(inf, None)`` when every feature is
    frozen, ``(None, None)`` when the attack failed, otherwise the norm and
    the attack result (``None`` for the oracle backend).
    """
    out: list = [None] * len(masks)
    pending = []
    for i, mask in enumerate(masks):
        if mask.free_count == 0:
            out[i] = (math.inf, None)
        elif cfg.backend == "oracle":
            out[i] = (oracle_ceval_model(model, x, mask), None)
        else:
            pending.append(i)
    if not pending:
        return out
    if cfg.backend == "cw":
        results = attack_cw_batch(model, [x] * len(pending), [masks[i] for i in pending], cfg)
        for i, r in zip(pending, results):
            out[i] = (None, None) if r is None else (r.l2_norm, r)
        return out
    for i in pending:
        try:
            r = run_attack(model, x, masks[i], cfg)
            out[i] = (r.l2_norm, r)
        except AttackFailed:
            out[i] = (None, None)
    return out


def _mask(explanation: Explanation, x) -> Mask:
    n = np.asarray(x).size
    if explanation.n_features != n:
        raise ValueError(f"explanation covers {explanation.n_features} features, input has {n}")
    return Mask.from_explanation(explanation, n)


def compute_ceval(model, x, explanation: Explanation, cfg: AttackConfig) -> CEvalResult:
    """Minimum L2 perturbation of the non-explanatory features that flips the label.

    A full explanation gives ``inf`` without running an attack. An attack
    failure raises :class:`MetricUnavailable` rather than returning ``inf``.
    """
    mask = _mask(explanation, x)
    if explanation.is_full:
        return CEvalResult(math.inf, cfg.backend, explanation)
    try:
        (c, result), = c_values(model, x, [mask], cfg)
    except AllFrozen:  # pragma: no cover - guarded by is_full
        return CEvalResult(math.inf, cfg.backend, explanation)
    if c is None:
        raise MetricUnavailable(f"{cfg.backend} found no flip for k={explanation.k}")
    return CEvalResult(c, cfg.backend, explanation, perturbation=result)


def compute_normalized(model, x, explanation: Explanation, cfg: AttackConfig) -> CEvalResult:
    """``c(e) / c(empty)`` with both runs on the same backend.

    For the empty explanation the single run is reused, so the ratio is 1.
    """
    empty = Explanation([], explanation.n_features, explanation.source)
    base = compute_ceval(model, x, empty, cfg)
    if explanation.k == 0:
        res = CEvalResult(base.c_value, cfg.backend, explanation, perturbation=base.perturbation)
    else:
        res = compute_ceval(model, x, explanation, cfg)
    res.c_empty = base.c_value
    res.normalized = res.c_value / base.c_value if base.c_value > 0 else math.inf
    return res


@dataclass
class CEvalPlot:
    """c-Eval of the growing prefixes of one importance ranking.

    ``points`` holds ``(k, c)``; ``c`` is ``None`` where the attack failed
    (also listed in ``gaps``). ``violations`` lists the ``k`` whose value
    fell below an earlier point by more than ``slack``.
    """

    points: list
    explainer_id: str
    input_id: str = ""
    gaps: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        return not self.violations

    def height(self) -> float:
        """Mean of the finite points."""
        vals = [c for _, c in self.points if c is not None and math.isfinite(c)]
        return float(np.mean(vals)) if vals else math.nan


def _violations(points, slack):
    out, best = [], -math.inf
    for k, c in points:
        if c is None:
            continue
        if c < best * (1.0 - slack):
            out.append(k)
        best = max(best, c)
    return out


def ceval_plot(model, x, importance: ImportanceMap, k_list, cfg: AttackConfig, *,
               input_id: str = "", slack: float = 0.0) -> CEvalPlot:
    """c-Eval at each prefix ``top_k(importance, k)`` for ``k`` in ``k_list``."""
    k_list = [int(k) for k in k_list]
    if any(b <= a for a, b in zip(k_list, k_list[1:])):
        raise ValueError("k_list must be strictly increasing")
    if k_list and (k_list[0] < 0 or k_list[-1] > importance.n):
        raise ValueError(f"k values must lie in [0, {importance.n}]")
    explanations = [top_k(importance, k) for k in k_list]
    values = c_values(model, x, [_mask(e, x) for e in explanations], cfg)
    points = [(k, c) for k, (c, _) in zip(k_list, values)]
    gaps = [k for k, c in points if c is None]
    return CEvalPlot(points, importance.explainer_id, input_id, gaps, _violations(points, slack))


def harmonic_estimate(c1: float, c2: float) -> float:
    """``1 / sqrt(1/c1^2 + 1/c2^2)``: the distance to a single hyperplane."""
    return 1.0 / math.sqrt(1.0 / c1 ** 2 + 1.0 / c2 ** 2)


@dataclass
class NearAffineRow:
    k: int
    c1: float | None
    c2: float | None
    c0: float | None
    c_est: float | None
    deviation: float | None
    note: str = ""


@dataclass
class NearAffineReport:
    rows: list

    @property
    def max_deviation(self) -> float:
        devs = [r.deviation for r in self.rows if r.deviation is not None]
        return max(devs) if devs else math.nan


def near_affine_check(model, x, importance: ImportanceMap, k_list, cfg: AttackConfig,
                      c0: float | None = None) -> NearAffineReport:
    """Compare ``c(empty)`` with the harmonic combination of ``c(e)`` and ``c(x minus e)``.

    Rows whose ``e`` or complement would be empty are kept with a note and no
    values; rows with a failed attack carry ``None`` in the missing fields.
    """
    n = importance.n
    if c0 is None:
        (c0, _), = c_values(model, x, [Mask.empty(n)], cfg)
    rows = []
    valid, masks = [], []
    for k in k_list:
        if not 0 < k < n:
            rows.append(NearAffineRow(k, None, None, c0, None, None,
                                      "explanation or complement empty"))
            continue
        mask = Mask.from_explanation(top_k(importance, k), n)
        valid.append(len(rows))
        rows.append(None)
        masks.extend([mask, mask.complement()])
    values = c_values(model, x, masks, cfg) if masks else []
    for j, pos in enumerate(valid):
        (c1, _), (c2, _) = values[2 * j], values[2 * j + 1]
        c_est = dev = None
        note = ""
        if c1 is not None and c2 is not None:
            c_est = harmonic_estimate(c1, c2)
            if c0 is not None and c0 > 0:
                dev = abs(c_est - c0) / c0
        else:
            note = "attack failed"
        rows[pos] = NearAffineRow(int(k_list[pos]), c1, c2, c0, c_est, dev, note)
    return NearAffineReport(rows)


def pearson(xs, ys) -> float:
    """Sample Pearson correlation; raises on fewer than two points or zero variance."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("pearson needs two equal-length sequences")
    if xs.size < 2:
        raise ValueError("pearson needs at least two points")
    dx, dy = xs - xs.mean(), ys - ys.mean()
    sx, sy = math.sqrt(dx @ dx), math.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise ValueError("pearson is undefined for a constant sequence")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


# ---------------------------------------------------------------- ranking
@dataclass
class RankRow:
    explainer: str
    values: list
    skipped: int

    @property
    def n(self) -> int:
        return len(self.values)

    def summary(self) -> dict:
        v = np.asarray(self.values, dtype=np.float64)
        if v.size == 0:
            stats = dict.fromkeys(("mean_C", "median_C", "q1", "q3"), math.nan)
        else:
            q1, med, q3 = np.percentile(v, [25, 50, 75])
            stats = {"mean_C": float(v.mean()), "median_C": float(med),
                     "q1": float(q1), "q3": float(q3)}
        return {"explainer": self.explainer, **stats, "n": self.n, "skipped": self.skipped}


def _rank_one(args):
    model, x, explainers, k, cfg, seed = args
    n = np.asarray(x).size
    masks = [Mask.empty(n)]
    for spec in explainers:
        masks.append(Mask.from_explanation(spec.explanation(model, x, k, seed=seed), n))
    values = [c for c, _ in c_values(model, x, masks, cfg)]
    c0 = values[0]
    if c0 is None or c0 == 0:
        return [None] * len(explainers)
    return [None if c is None else c / c0 for c in values[1:]]


def rank_explainers(model, images, explainers: list[ExplainerSpec], k_fraction: float,
                    cfg: AttackConfig, *, seed: int = 0, workers: int = 1) -> list[RankRow]:
    """Normalized c-Eval of each explainer over a sample of inputs.

    ``c(empty)`` is computed once per input and shared by all explainers.
    Inputs where an attack fails count as skipped for that explainer.
    """
    if not 0 < k_fraction < 1:
        raise ValueError("k_fraction must lie in (0, 1)")
    images = list(images)
    if not images:
        raise ValueError("rank_explainers needs at least one input")
    k = budget(np.asarray(images[0]).size, k_fraction)
    tasks = [(model, x, explainers, k, cfg, seed + i) for i, x in enumerate(images)]
    per_image = parallel_map(_rank_one, tasks, workers)
    rows = []
    for j, spec in enumerate(explainers):
        vals = [r[j] for r in per_image]
        kept = [v for v in vals if v is not None]
        rows.append(RankRow(spec.name, kept, len(vals) - len(kept)))
    return rows


RANK_COLUMNS = ["explainer", "mean_C", "median_C", "q1", "q3", "n", "skipped"]


def write_ranking_csv(rows: list[RankRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RANK_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.summary().items()})


def write_plot_csv(plot: CEvalPlot, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "c_value"])
        for k, c in plot.points:
            writer.writerow([k, "" if c is None else json_float(c)])
