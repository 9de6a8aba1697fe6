"""Exact arithmetic on marked-point divisors on the 2-sphere.

Weights may be floats or :class:`fractions.Fraction`; stability comparisons
are exact when every weight is a Fraction, otherwise a declared float
tolerance is used for the semi-stable equality.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

Weight = Union[float, Fraction]

#: tolerance for the semi-stable equality 2*beta_max == sum(beta) with floats
SEMISTABLE_TOL = 1e-12

#: minimum angular separation between marked points (radians)
MIN_SEPARATION = 1e-9


class StabilityClass(Enum):
    STABLE = "Stable"
    SEMI_STABLE = "SemiStable"
    UNSTABLE = "Unstable"

    def __str__(self) -> str:
        return self.value


def _as_float(w: Weight) -> float:
    return float(w)


def _equator_positions(k: int) -> np.ndarray:
    lon = 2.0 * np.pi * np.arange(k) / max(k, 1)
    return np.stack([np.cos(lon), np.sin(lon), np.zeros(k)], axis=1)


@dataclass(frozen=True)
class Divisor:
    """Marked-point data beta = sum_j beta_j [p_j].

    Weights are stored sorted ascending, so ``weights[-1]`` is the largest
    weight; positions are permuted together with the weights.  Positions are
    unit 3-vectors, pairwise distinct.
    """

    weights: tuple
    positions: np.ndarray = field(repr=False)

    def __init__(self, weights: Sequence[Weight], positions=None):
        weights = list(weights)
        k = len(weights)
        for w in weights:
            if not (0 < _as_float(w) < 1):
                raise ValueError(f"weight {w} outside the open interval (0, 1)")
        if positions is None:
            pos = _equator_positions(k)
        else:
            pos = np.asarray(positions, dtype=float).reshape(k, 3)
            norms = np.linalg.norm(pos, axis=1)
            if np.any(norms == 0):
                raise ValueError("zero position vector")
            pos = pos / norms[:, None]
        order = sorted(range(k), key=lambda i: _as_float(weights[i]))
        weights = [weights[i] for i in order]
        pos = pos[order] if k else pos.reshape(0, 3)
        for i in range(k):
            for j in range(i + 1, k):
                cosang = float(np.clip(np.dot(pos[i], pos[j]), -1.0, 1.0))
                if np.arccos(cosang) <= MIN_SEPARATION:
                    raise ValueError(f"marked points {i} and {j} coincide")
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "positions", pos)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def exact(self) -> bool:
        """True when every weight is a Fraction (exact comparisons apply)."""
        return self.k > 0 and all(isinstance(w, Fraction) for w in self.weights)

    @property
    def beta_max(self) -> Weight:
        if self.k == 0:
            raise ValueError("empty divisor has no maximal weight")
        return self.weights[-1]

    def total(self) -> Weight:
        return sum(self.weights, Fraction(0) if self.exact else 0.0)

    def weights_float(self) -> np.ndarray:
        return np.array([_as_float(w) for w in self.weights], dtype=float)

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        def enc(w):
            return f"{w.numerator}/{w.denominator}" if isinstance(w, Fraction) else w

        return json.dumps(
            {
                "weights": [enc(w) for w in self.weights],
                "positions": [list(map(float, p)) for p in self.positions],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Divisor":
        data = json.loads(text)
        if not isinstance(data, dict) or "weights" not in data:
            raise ValueError("divisor JSON must be an object with a 'weights' key")
        weights = []
        for w in data["weights"]:
            if isinstance(w, str):
                num, _, den = w.partition("/")
                weights.append(Fraction(int(num), int(den)) if den else Fraction(w))
            else:
                weights.append(float(w))
        return cls(weights, data.get("positions"))


@dataclass(frozen=True)
class LimitDivisor:
    """Two-point limit divisor produced by a partition {I, J} of the marks.

    ``beta_p >= beta_q`` and ``beta_p + beta_q`` equals the total weight of
    the parent divisor.  ``partition`` holds the 0-based indices on the
    beta_p side.  Splits with ``beta_p >= 1`` carry no conical structure and
    are flagged invalid.
    """

    beta_p: float
    beta_q: float
    partition: frozenset
    valid: bool = True
    conditional: bool = False


def _warn_small_k(d: Divisor, name: str) -> None:
    if d.k < 3:
        warnings.warn(
            f"{name}: divisor has k={d.k} < 3 marked points; the convergence "
            "theorems assume k >= 3",
            UserWarning,
            stacklevel=3,
        )


def euler_characteristic(d: Divisor) -> Weight:
    """chi(S^2, beta) = 2 - sum(beta_j)."""
    return (Fraction(2) if d.exact else 2.0) - d.total()


def classify_stability(d: Divisor, tol: float = SEMISTABLE_TOL) -> StabilityClass:
    """Troyanov trichotomy comparing 2*beta_max with sum(beta).

    Stable iff sum >= 2 or 2*beta_max < sum; semi-stable iff sum < 2 and
    2*beta_max == sum (exact for Fraction weights, within ``tol`` for
    floats); unstable otherwise.
    """
    if d.k < 1:
        raise ValueError("classification needs at least one marked point")
    _warn_small_k(d, "classify_stability")
    total = d.total()
    bmax = d.beta_max
    if d.exact:
        if total >= 2 or 2 * bmax < total:
            return StabilityClass.STABLE
        if 2 * bmax == total:
            return StabilityClass.SEMI_STABLE
        return StabilityClass.UNSTABLE
    total = float(total)
    gap = 2.0 * float(bmax) - total
    if total >= 2.0 or gap < -tol:
        return StabilityClass.STABLE
    if abs(gap) <= tol:
        return StabilityClass.SEMI_STABLE
    return StabilityClass.UNSTABLE


def alpha_invariant(d: Divisor) -> Weight:
    """(1 - beta_max) / chi(S^2, beta); requires sum(beta) < 2."""
    if d.k < 1:
        raise ValueError("alpha invariant needs at least one marked point")
    chi = euler_characteristic(d)
    if _as_float(chi) <= 0:
        raise ValueError("alpha invariant formula requires sum(beta) < 2")
    one = Fraction(1) if d.exact else 1.0
    return (one - d.beta_max) / chi


def enumerate_partitions(d: Divisor) -> list:
    """All unordered splits {I, J} of the marks into two groups (J may be
    empty), each mapped to a :class:`LimitDivisor` with beta_p the larger
    side-sum.  Exactly 2^(k-1) splits are returned; invalid ones
    (beta_p >= 1) are flagged, not dropped.
    """
    if d.k < 1:
        raise ValueError("partition enumeration needs at least one marked point")
    w = d.weights_float()
    k = d.k
    total = float(w.sum())
    out = []
    # fixing mark k-1 on one side enumerates unordered pairs exactly once
    for bits in range(2 ** (k - 1)):
        side = {k - 1}
        for i in range(k - 1):
            if bits >> i & 1:
                side.add(i)
        s = float(w[list(side)].sum())
        other = frozenset(range(k)) - side
        if s >= total - s:
            bp, bq, part = s, total - s, frozenset(side)
        else:
            bp, bq, part = total - s, s, other
        out.append(LimitDivisor(bp, bq, part, valid=bp < 1.0))
    out.sort(key=lambda ld: (ld.beta_p, sorted(ld.partition)))
    return out


def predict_limit_divisor(d: Divisor) -> LimitDivisor:
    """Predicted limit divisor for a non-stable flow.

    Semi-stable pairs limit to (beta_max, beta_max).  For unstable pairs the
    reported split puts the largest weight alone (beta_k, sum of the rest);
    this is proved only under the entropy threshold hypothesis, so the
    result carries ``conditional=True``.
    """
    cls = classify_stability(d)
    if cls is StabilityClass.STABLE:
        raise ValueError("stable divisor: the flow limit keeps all marked points")
    _warn_small_k(d, "predict_limit_divisor")
    w = d.weights_float()
    part = frozenset({d.k - 1})
    if cls is StabilityClass.SEMI_STABLE:
        bmax = float(d.beta_max)
        return LimitDivisor(bmax, bmax, part, valid=bmax < 1.0)
    rest = float(w[:-1].sum())
    return LimitDivisor(float(d.beta_max), rest, part, valid=True, conditional=True)
