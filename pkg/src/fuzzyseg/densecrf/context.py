"""Anatomy context label vectors and per-pixel context feature maps."""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .._validation import check_label_map

# order: pre-fat background, fat, mammary, muscle, retro-muscle background, tumor
DEFAULT_VECTORS = (
    (61.2, 20.0, 15.0),
    (25.0, 37.1, 0.0),
    (40.0, 0.0, 0.0),
    (55.0, 37.1, 0.0),
    (18.8, 20.7, 15.0),
    (40.0, 30.0, 26.5),
)
APPROX_TOL = 1.5

# class index -> context slot (0-based) for the non-background classes
_SLOT = {1: 5, 2: 1, 3: 2, 4: 3}


class ContextConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class ContextLabelSet:
    """Six 3-vectors, one per anatomical context (slots 1..6)."""

    vectors: tuple = DEFAULT_VECTORS

    def __post_init__(self):
        arr = np.asarray(self.vectors, float)
        if arr.shape != (6, 3):
            raise ValueError(f"need six 3-vectors, got shape {arr.shape}")
        object.__setattr__(self, "vectors", tuple(tuple(float(x) for x in row) for row in arr))

    def array(self):
        return np.asarray(self.vectors, float)

    def distance(self, s, t):
        """Euclidean distance between slots ``s`` and ``t`` (1-based)."""
        a = self.array()
        return float(np.linalg.norm(a[s - 1] - a[t - 1]))

    def layer_distances(self):
        """Layer-pair distances grouped by separation: {1: [...], 2: [...], 3: [...]}."""
        return {
            gap: [((i, i + gap), self.distance(i, i + gap)) for i in range(1, 6 - gap)]
            for gap in (1, 2, 3)
        }

    def distance_table(self):
        return {(s, t): self.distance(s, t) for s, t in combinations(range(1, 7), 2)}

    def violations(self, tol=APPROX_TOL):
        """Human-readable list of violated ordering constraints (empty when valid)."""
        out = []
        groups = self.layer_distances()
        for near, far in ((1, 2), (2, 3)):
            lo = min(groups[near], key=lambda p: p[1])
            hi = max(groups[far], key=lambda p: p[1])
            if not lo[1] > hi[1]:
                out.append(
                    f"layers {lo[0]} at distance {lo[1]:.3f} must be farther apart than "
                    f"layers {hi[0]} at {hi[1]:.3f} (separation {near} vs {far})"
                )
        d = {s: self.distance(6, s) for s in range(1, 6)}
        for a, b in ((2, 4), (1, 5)):
            if abs(d[a] - d[b]) > tol:
                out.append(
                    f"tumor distances to slots {a} and {b} ({d[a]:.3f}, {d[b]:.3f}) differ by more than {tol}"
                )
        if not d[3] > max(d[2], d[4]):
            out.append(f"tumor-mammary distance {d[3]:.3f} must exceed tumor-fat/muscle distances")
        if not min(d[2], d[4]) > max(d[1], d[5]):
            out.append("tumor-fat/muscle distances must exceed tumor-background distances")
        return out


def solve_context_labels(vectors=None, rederive=False, seed=0, restarts=20, tol=APPROX_TOL):
    """Return a context label set satisfying the layer-distance ordering.

    By default the standard vectors are checked and returned. ``vectors``
    supplies a custom set, which is rejected with the first violated
    constraint. With ``rederive`` a fresh set is found by random-restart
    projected descent on squared hinge penalties of the constraints, then
    validated the same way.
    """
    if rederive:
        return _rederive(seed, restarts, tol)
    ctx = ContextLabelSet(DEFAULT_VECTORS if vectors is None else vectors)
    bad = ctx.violations(tol)
    if bad:
        raise ContextConstraintError(bad[0])
    return ctx


def _penalty_grad(x, margin, tol):
    # x: (6, 3); returns loss and gradient of squared hinge penalties
    grad = np.zeros_like(x)
    loss = 0.0

    def dist(s, t):
        v = x[s] - x[t]
        n = np.linalg.norm(v) + 1e-12
        return n, v / n

    def hinge(big, small, m):
        # want big - small >= m
        nonlocal loss
        (db, gb), (ds, gs) = dist(*big), dist(*small)
        gap = m - (db - ds)
        if gap > 0:
            loss += gap * gap
            for (s, t), g, sign in ((big, gb, -1.0), (small, gs, 1.0)):
                grad[s] += 2 * gap * sign * g
                grad[t] -= 2 * gap * sign * g

    def close(p, q):
        nonlocal loss
        (dp, gp), (dq, gq) = dist(*p), dist(*q)
        diff = dp - dq
        excess = abs(diff) - 0.5 * tol
        if excess > 0:
            loss += excess * excess
            g = 2 * excess * np.sign(diff)
            grad[p[0]] += g * gp
            grad[p[1]] -= g * gp
            grad[q[0]] -= g * gq
            grad[q[1]] += g * gq

    d1 = [(i, i + 1) for i in range(4)]
    d2 = [(i, i + 2) for i in range(3)]
    d3 = [(i, i + 3) for i in range(2)]
    for a in d1:
        for b in d2:
            hinge(a, b, margin)
    for a in d2:
        for b in d3:
            hinge(a, b, margin)
    close((5, 1), (5, 3))
    close((5, 0), (5, 4))
    for side in ((5, 1), (5, 3)):
        hinge((5, 2), side, margin)
        for bg in ((5, 0), (5, 4)):
            hinge(side, bg, margin)
    return loss, grad


def _rederive(seed, restarts, tol, steps=3000, lr=0.05, margin=2.0):
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        x = rng.uniform(0, 60, (6, 3))
        for _ in range(steps):
            loss, g = _penalty_grad(x, margin, tol)
            if loss == 0.0:
                break
            x -= lr * g
            x = np.maximum(x, 0.0)  # projection onto the non-negative orthant
        ctx = ContextLabelSet(np.round(x, 1))
        if not ctx.violations(tol):
            return ctx
    raise ContextConstraintError(f"no feasible context label set found in {restarts} restarts")


def context_slots(labels):
    """Context slot (1..6) of every pixel of a 5-class label map.

    Tumor, fat, mammary and muscle map to slots 6, 2, 3 and 4. Background
    above the first foreground pixel of its column is slot 1, below the
    last foreground pixel slot 5; enclosed background and columns without
    foreground are slot 1.
    """
    labels = check_label_map(labels)
    h = labels.shape[0]
    slots = np.ones(labels.shape, np.int8)
    for cls, slot in _SLOT.items():
        slots[labels == cls] = slot + 1
    fg = labels != 0
    has = fg.any(axis=0)
    last = h - 1 - np.argmax(fg[::-1], axis=0)
    rows = np.arange(h)[:, None]
    below = (rows > last[None]) & has[None] & ~fg
    slots[below] = 5
    return slots


def build_context_map(labels, ctx=None):
    """Per-pixel context vectors ``[3, H, W]`` for a label map."""
    ctx = ContextLabelSet() if ctx is None else ctx
    return np.moveaxis(ctx.array()[context_slots(labels) - 1], -1, 0)
