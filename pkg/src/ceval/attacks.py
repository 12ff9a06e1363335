"""Masked minimum-distortion perturbations.

Every attack here only moves *free* coordinates; coordinates frozen by the
mask (the explanatory features) are copied from the input, never recomputed,
so they stay bit-identical. All attacks target a change away from the model's
own prediction on ``x`` and measure distortion in L2.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .optim import Adam

__all__ = [
    "AttackFailed",
    "AllFrozen",
    "Mask",
    "EpsSchedule",
    "CWConfig",
    "AttackConfig",
    "PerturbationResult",
    "VerifyReport",
    "attack_gsa",
    "attack_iga",
    "attack_cw",
    "attack_cw_batch",
    "run_attack",
    "verify_result",
    "bounded_iga",
]

BACKENDS = ("gsa", "iga", "cw")


class AttackFailed(RuntimeError):
    """No perturbation within the attack's search space flipped the label."""


class AllFrozen(ValueError):
    """The mask freezes every feature, so nothing can be perturbed."""


@dataclass(frozen=True)
class Mask:
    """Per-feature freeze flags over the flattened input."""

    frozen: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frozen", np.asarray(self.frozen, dtype=bool).reshape(-1))

    @property
    def n(self) -> int:
        return self.frozen.size

    @property
    def free(self) -> np.ndarray:
        return ~self.frozen

    @property
    def free_count(self) -> int:
        return int(self.n - np.count_nonzero(self.frozen))

    @classmethod
    def empty(cls, n: int) -> "Mask":
        return cls(np.zeros(n, dtype=bool))

    @classmethod
    def from_indices(cls, indices, n: int) -> "Mask":
        frozen = np.zeros(n, dtype=bool)
        frozen[np.asarray(indices, dtype=np.int64)] = True
        return cls(frozen)

    @classmethod
    def from_explanation(cls, explanation, n: int) -> "Mask":
        return cls.from_indices(explanation.feature_indices, n)

    def complement(self) -> "Mask":
        return Mask(~self.frozen)


@dataclass(frozen=True)
class EpsSchedule:
    """Geometric sequence ``eps0 * factor**i`` for ``i < max_steps``."""

    eps0: float = 0.01
    factor: float = 1.3
    max_steps: int = 40

    def __post_init__(self):
        if not (self.eps0 > 0 and self.factor > 1 and self.max_steps >= 1):
            raise ValueError("eps schedule needs eps0 > 0, factor > 1, max_steps >= 1")

    def values(self) -> np.ndarray:
        return self.eps0 * self.factor ** np.arange(self.max_steps)


@dataclass(frozen=True)
class CWConfig:
    c_init: float = 1e-2
    binary_search_steps: int = 9
    max_iters: int = 1000
    adam_lr: float = 5e-3
    kappa: float = 0.0
    abort_early: bool = True
    w_clip: float = 8.0
    linearized_starts: int = 2

    def __post_init__(self):
        if self.linearized_starts < 0:
            raise ValueError("linearized_starts must be >= 0")
        if not (self.c_init > 0 and self.adam_lr > 0 and self.w_clip > 0):
            raise ValueError("CW constants must be positive")
        if self.binary_search_steps < 1 or self.max_iters < 1:
            raise ValueError("CW step counts must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")


@dataclass(frozen=True)
class AttackConfig:
    """Backend choice plus every tunable constant.

    ``iga_alpha`` is the IGA step as a fraction of the current epsilon, so a
    single step with ``iga_alpha=1`` is exactly the GSA update.
    """

    backend: str = "iga"
    eps_schedule: EpsSchedule = field(default_factory=EpsSchedule)
    iga_alpha: float = 0.25
    iga_iters: int = 10
    cw: CWConfig = field(default_factory=CWConfig)
    norm: str = "l2"

    def __post_init__(self):
        if self.backend not in BACKENDS + ("oracle",):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.norm != "l2":
            raise ValueError("only the L2 norm is supported")
        if not self.iga_alpha > 0 or self.iga_iters < 1:
            raise ValueError("iga_alpha must be positive and iga_iters >= 1")
        if isinstance(self.eps_schedule, dict):
            object.__setattr__(self, "eps_schedule", EpsSchedule(**self.eps_schedule))
        if isinstance(self.cw, dict):
            object.__setattr__(self, "cw", CWConfig(**self.cw))

    def with_backend(self, backend: str) -> "AttackConfig":
        return AttackConfig(backend, self.eps_schedule, self.iga_alpha, self.iga_iters,
                            self.cw, self.norm)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PerturbationResult:
    perturbed: np.ndarray
    delta: np.ndarray
    l2_norm: float
    original_label: int
    new_label: int
    backend: str
    iterations_used: int

    def to_dict(self, include_delta: bool = False) -> dict:
        doc = {
            "backend": self.backend,
            "l2_norm": self.l2_norm,
            "original_label": self.original_label,
            "new_label": self.new_label,
            "iterations_used": self.iterations_used,
        }
        if include_delta:
            doc["delta"] = self.delta.reshape(-1).tolist()
            doc["shape"] = list(self.delta.shape)
        return doc

    def to_json(self, include_delta: bool = False) -> str:
        return json.dumps(self.to_dict(include_delta))


# ------------------------------------------------------------------ helpers
def _flipped(z: np.ndarray, l0) -> np.ndarray:
    """Rows whose argmax left ``l0`` by more than rounding noise."""
    z = np.atleast_2d(z)
    l0 = np.broadcast_to(np.asarray(l0), (z.shape[0],))
    rows = np.arange(z.shape[0])
    others = z.copy()
    others[rows, l0] = -np.inf
    gap = others.max(axis=1) - z[rows, l0]
    tol = 1e-10 * (1.0 + np.abs(z).max(axis=1))
    return (z.argmax(axis=1) != l0) & (gap > tol)


def _prepare(model, x, mask: Mask):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    if flat.size != model.n_features:
        raise ValueError(f"input has {flat.size} features, model expects {model.n_features}")
    if mask.n != flat.size:
        raise ValueError(f"mask covers {mask.n} features, input has {flat.size}")
    if flat.min() < 0.0 or flat.max() > 1.0:
        raise ValueError("attack inputs must lie in [0, 1]")
    if mask.free_count == 0:
        raise AllFrozen("every feature is frozen")
    l0 = int(np.argmax(model.decision_function(flat)[0]))
    return x, flat, l0


def _result(model, x, flat, candidate, l0, backend, iterations):
    # frozen coordinates were copied from ``flat``, so this difference is exactly 0 there
    perturbed = candidate.reshape(x.shape)
    delta = perturbed - x
    new_label = int(np.argmax(model.decision_function(candidate)[0]))
    return PerturbationResult(
        perturbed=perturbed,
        delta=delta,
        l2_norm=float(np.linalg.norm((candidate - flat))),
        original_label=l0,
        new_label=new_label,
        backend=backend,
        iterations_used=int(iterations),
    )


def _descent_sign(model, X, labels, free):
    """``sign`` of the gradient of ``-J_l`` on free coordinates, 0 on frozen ones.

    Stepping ``x - eps * sign(.)`` therefore climbs the cross-entropy of the
    original label, which is what pushes the prediction away from it.
    """
    _, grad = model.loss_gradient(X, labels)
    return np.sign(-grad.reshape(len(X), -1)) * free


# --------------------------------------------------------------------- GSA
def attack_gsa(model, x, mask: Mask, cfg: AttackConfig | None = None) -> PerturbationResult:
    """Single signed-gradient step, searching epsilon upward until the label flips."""
    cfg = cfg or AttackConfig(backend="gsa")
    x, flat, l0 = _prepare(model, x, mask)
    free = mask.free
    step = _descent_sign(model, flat[None], [l0], free)[0]
    eps_values = cfg.eps_schedule.values()
    chunk = 8
    for start in range(0, len(eps_values), chunk):
        eps = eps_values[start:start + chunk, None]
        cand = np.clip(flat[None] - eps * step[None], 0.0, 1.0)
        cand = np.where(free[None], cand, flat[None])
        hits = np.flatnonzero(_flipped(model.decision_function(cand), l0))
        if hits.size:
            i = int(hits[0])
            return _result(model, x, flat, cand[i], l0, "gsa", start + i + 1)
    raise AttackFailed(f"GSA found no flip up to eps={eps_values[-1]:.4g}")


# --------------------------------------------------------------------- IGA
def _iga_run(model, flat, l0, free, eps, alpha, iters):
    """Run IGA for a column of epsilons at once; returns final iterates."""
    lower = np.clip(flat[None] - eps, 0.0, 1.0)
    upper = np.clip(flat[None] + eps, 0.0, 1.0)
    cur = np.repeat(flat[None], len(eps), axis=0)
    labels = np.full(len(eps), l0)
    for _ in range(iters):
        step = _descent_sign(model, cur, labels, free)
        cur = cur - alpha * step
        cur = np.clip(cur, flat[None] - eps, flat[None] + eps)
        cur = np.minimum(np.maximum(cur, lower), upper)
        cur = np.where(free[None], cur, flat[None])
    return cur


def attack_iga(model, x, mask: Mask, cfg: AttackConfig | None = None) -> PerturbationResult:
    """Iterated sign-gradient steps clipped to an epsilon box, epsilon searched upward."""
    cfg = cfg or AttackConfig(backend="iga")
    x, flat, l0 = _prepare(model, x, mask)
    free = mask.free
    eps_values = cfg.eps_schedule.values()
    chunk = 8
    for start in range(0, len(eps_values), chunk):
        eps = eps_values[start:start + chunk, None]
        cand = _iga_run(model, flat, l0, free, eps, cfg.iga_alpha * eps, cfg.iga_iters)
        hits = np.flatnonzero(_flipped(model.decision_function(cand), l0))
        if hits.size:
            i = int(hits[0])
            return _result(model, x, flat, cand[i], l0, "iga", (start + i + 1) * cfg.iga_iters)
    raise AttackFailed(f"IGA found no flip up to eps={eps_values[-1]:.4g}")


def bounded_iga(model, X, labels, epsilon: float, *, iters: int = 10,
                step: float = 0.25) -> np.ndarray:
    """Batch IGA against ``labels`` with ``||delta||_2 / sqrt(n) <= epsilon``.

    Used for adversarial training and robust-accuracy evaluation. Each
    coordinate is clipped to ``[x - epsilon, x + epsilon]`` and the final
    delta is rescaled if its normalized L2 norm still exceeds the bound.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    X = np.asarray(X, dtype=np.float64)
    shape = X.shape
    flat = X.reshape(len(X), -1)
    n = flat.shape[1]
    labels = np.asarray(labels, dtype=np.int64)
    lower = np.clip(flat - epsilon, 0.0, 1.0)
    upper = np.clip(flat + epsilon, 0.0, 1.0)
    cur = flat.copy()
    for _ in range(iters):
        _, grad = model.loss_gradient(cur, labels)
        # ascend the loss of the true label
        cur = cur + step * epsilon * np.sign(grad.reshape(len(cur), -1))
        cur = np.minimum(np.maximum(cur, lower), upper)
    delta = cur - flat
    norms = np.linalg.norm(delta, axis=1) / math.sqrt(n)
    scale = np.minimum(1.0, epsilon / np.maximum(norms, 1e-300))
    return np.clip(flat + delta * scale[:, None], 0.0, 1.0).reshape(shape)


# ---------------------------------------------------------------------- CW
def _to_tanh_space(values):
    return np.arctanh(np.clip(values * 2.0 - 1.0, -1.0, 1.0) * 0.999999)


def _linearized_starts(model, flat, l0, free, count):
    """Starting points on the linearized boundaries of the nearest rival classes.

    For each rival ``j`` the gradient ``g`` of ``z_j - z_l0`` restricted to
    free coordinates gives the step ``margin_j * g / ||g||^2`` onto the local
    decision hyperplane. The ``count`` rivals with the shortest steps are kept.
    """
    m = int(model.num_classes)
    rivals = [j for j in range(m) if j != l0]
    seeds = np.zeros((len(rivals), m))
    seeds[np.arange(len(rivals)), rivals] = 1.0
    seeds[:, l0] = -1.0
    z, grads = model.input_gradient(np.repeat(flat[None], len(rivals), axis=0), seeds)
    grads = grads.reshape(len(rivals), -1) * free
    gap = z[:, l0] - z[np.arange(len(rivals)), rivals]
    sq = (grads * grads).sum(axis=1)
    ok = sq > 0
    dist = np.where(ok, gap / np.sqrt(np.where(ok, sq, 1.0)), np.inf)
    order = [i for i in np.argsort(dist, kind="stable") if ok[i]][:count]
    starts = []
    for i in order:
        step = grads[i] * (gap[i] / sq[i]) * 1.02
        starts.append(np.where(free, np.clip(flat + step, 0.0, 1.0), flat))
    return starts


def _cw_batch(model, flats, l0s, frees, cfg: CWConfig, starts=None):
    """Masked Carlini-Wagner L2 over a batch sharing one model.

    Optimization variables live in tanh space; the scatter ``where(free, .,
    x)`` places them into the full input so frozen coordinates never move.
    ``starts`` optionally gives a different initial point per row (the
    distance term is always measured from ``flats``).
    """
    B, n = flats.shape
    m = int(model.num_classes)
    rows = np.arange(B)
    onehot = np.eye(m, dtype=bool)[l0s]
    w0 = _to_tanh_space(flats if starts is None else starts)
    lower = np.zeros(B)
    upper = np.full(B, 1e10)
    const = np.full(B, cfg.c_init)
    best_l2 = np.full(B, np.inf)
    best_adv = flats.copy()
    iterations = 0
    check_every = max(1, cfg.max_iters // 10)
    for _ in range(cfg.binary_search_steps):
        w = w0.copy()
        params = {"w": w}
        opt = Adam(cfg.adam_lr)
        round_success = np.zeros(B, dtype=bool)
        active = np.ones(B, dtype=bool)
        prev = np.full(B, np.inf)
        for it in range(cfg.max_iters):
            t = np.tanh(w)
            xp = np.where(frees, (t + 1.0) * 0.5, flats)
            diff = xp - flats
            l2sq = (diff * diff).sum(axis=1)
            z = model.decision_function(xp)
            real = z[rows, l0s]
            other_z = np.where(onehot, -np.inf, z)
            other_idx = other_z.argmax(axis=1)
            margin = real - other_z[rows, other_idx]
            fval = np.maximum(margin, -cfg.kappa)
            loss = l2sq + const * fval
            ok = _flipped(z, l0s)
            if cfg.kappa > 0:
                ok &= margin <= -cfg.kappa
            improved = ok & (l2sq < best_l2 ** 2) & active
            if improved.any():
                best_l2[improved] = np.sqrt(l2sq[improved])
                best_adv[improved] = xp[improved]
            round_success |= ok
            # d fval / d logits
            dz = np.zeros_like(z)
            live = margin > -cfg.kappa
            dz[rows[live], l0s[live]] = const[live]
            dz[rows[live], other_idx[live]] -= const[live]
            _, gx = model.input_gradient(xp, dz)
            gx = gx.reshape(B, n) + 2.0 * diff
            gw = np.where(frees & active[:, None], gx * (1.0 - t * t) * 0.5, 0.0)
            opt.step(params, {"w": gw})
            np.clip(w, -cfg.w_clip, cfg.w_clip, out=w)
            iterations += 1
            if cfg.abort_early and (it + 1) % check_every == 0:
                stalled = loss > prev * 0.9999
                active &= ~stalled
                prev = loss
                if not active.any():
                    break
        for i in range(B):
            if round_success[i]:
                upper[i] = min(upper[i], const[i])
                if upper[i] < 1e9:
                    const[i] = (lower[i] + upper[i]) / 2
            else:
                lower[i] = max(lower[i], const[i])
                if upper[i] < 1e9:
                    const[i] = (lower[i] + upper[i]) / 2
                else:
                    const[i] *= 10
    return best_adv, best_l2, iterations


def attack_cw_batch(model, X, masks, cfg: AttackConfig | None = None):
    """Masked CW for several (input, mask) pairs against one model.

    Returns a list with a :class:`PerturbationResult` per row, or ``None``
    where no successful perturbation was found.
    """
    cfg = cfg or AttackConfig(backend="cw")
    prepared = [_prepare(model, x, mk) for x, mk in zip(X, masks)]
    owner, flats, l0s, frees, starts = [], [], [], [], []
    for i, ((_, flat, l0), mk) in enumerate(zip(prepared, masks)):
        extra = _linearized_starts(model, flat, l0, mk.free, cfg.cw.linearized_starts) \
            if cfg.cw.linearized_starts else []
        for start in [flat, *extra]:
            owner.append(i)
            flats.append(flat)
            l0s.append(l0)
            frees.append(mk.free)
            starts.append(start)
    owner = np.array(owner)
    best_adv, best_l2, iterations = _cw_batch(
        model, np.stack(flats), np.array(l0s), np.stack(frees), cfg.cw, np.stack(starts))
    out = []
    for i, (x, flat, l0) in enumerate(prepared):
        rows = np.flatnonzero(owner == i)
        r = rows[np.argmin(best_l2[rows])]
        if math.isinf(best_l2[r]):
            out.append(None)
        else:
            out.append(_result(model, x, flat, best_adv[r], l0, "cw", iterations))
    return out


def attack_cw(model, x, mask: Mask, cfg: AttackConfig | None = None) -> PerturbationResult:
    """Masked CW L2 attack with binary search over the trade-off constant."""
    result = attack_cw_batch(model, [x], [mask], cfg)[0]
    if result is None:
        raise AttackFailed("CW found no successful perturbation")
    return result


def run_attack(model, x, mask: Mask, cfg: AttackConfig) -> PerturbationResult:
    if cfg.backend == "gsa":
        return attack_gsa(model, x, mask, cfg)
    if cfg.backend == "iga":
        return attack_iga(model, x, mask, cfg)
    if cfg.backend == "cw":
        return attack_cw(model, x, mask, cfg)
    raise ValueError(f"backend {cfg.backend!r} does not produce perturbations")


# -------------------------------------------------------------- validation
@dataclass
class VerifyReport:
    ok: bool
    violations: list[str]

    def __bool__(self) -> bool:
        return self.ok


def verify_result(model, x, mask: Mask, result: PerturbationResult) -> VerifyReport:
    """Re-check a result's invariants from scratch."""
    violations = []
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    pert = np.asarray(result.perturbed, dtype=np.float64).reshape(-1)
    if pert.shape != flat.shape:
        return VerifyReport(False, ["shape mismatch between input and perturbed"])
    frozen = mask.frozen
    if not np.array_equal(pert[frozen].view(np.uint64), flat[frozen].view(np.uint64)):
        violations.append("frozen feature modified")
    if not np.all(np.isfinite(pert)) or pert.min() < 0.0 or pert.max() > 1.0:
        violations.append("perturbed input outside [0, 1]")
    original = int(np.argmax(model.decision_function(flat)[0]))
    recomputed = int(np.argmax(model.decision_function(pert)[0]))
    if recomputed == original:
        violations.append("label unchanged")
    if recomputed != result.new_label:
        violations.append(f"stored new_label {result.new_label} != recomputed {recomputed}")
    norm = float(np.linalg.norm(pert - flat))
    if not math.isclose(norm, result.l2_norm, rel_tol=1e-9, abs_tol=1e-12):
        violations.append(f"l2_norm {result.l2_norm} != recomputed {norm}")
    delta = np.asarray(result.delta, dtype=np.float64).reshape(-1)
    if not np.array_equal(delta, pert - flat):
        violations.append("delta does not equal perturbed - x")
    return VerifyReport(not violations, violations)
