"""Comparison functions (class K-infinity and KL) with closed-form inverses.

Every function is a power law ``c * r**p`` or a finite composition of power
laws. That family is closed under composition and inversion, which covers
the quadratic Lyapunov sandwich bounds and everything derived from them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

POWER = "power-law"
COMPOSITION = "affine-composition"


def _check_nonneg(r):
    arr = np.asarray(r, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError(f"comparison functions are defined on [0, inf); got {r!r}")
    return arr


def _unwrap(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


@dataclass(frozen=True)
class ComparisonFn:
    """A class K-infinity function.

    ``kind == "power-law"`` evaluates ``c * r**p``. ``kind ==
    "affine-composition"`` evaluates ``outer(inner(r))``; ``c`` and ``p``
    are unused in that case.
    """

    kind: str = POWER
    c: float = 1.0
    p: float = 1.0
    outer: Optional["ComparisonFn"] = None
    inner: Optional["ComparisonFn"] = None

    def __post_init__(self):
        if self.kind == POWER:
            if not (self.c > 0 and self.p > 0):
                raise ValueError(f"power law needs c > 0 and p > 0, got c={self.c}, p={self.p}")
        elif self.kind == COMPOSITION:
            if self.outer is None or self.inner is None:
                raise ValueError("composition needs both outer and inner functions")
        else:
            raise ValueError(f"unknown comparison function kind {self.kind!r}")

    def eval(self, r):
        r = _check_nonneg(r)
        return _unwrap(self._eval(r))

    __call__ = eval

    def _eval(self, r):
        if self.kind == POWER:
            return self.c * np.power(r, self.p)
        return self.outer._eval(self.inner._eval(r))

    def inverse(self, v):
        v = _check_nonneg(v)
        return _unwrap(self._inverse(v))

    def _inverse(self, v):
        if self.kind == POWER:
            return np.power(v / self.c, 1.0 / self.p)
        return self.inner._inverse(self.outer._inverse(v))

    def inverted(self) -> "ComparisonFn":
        """Return the inverse as a ComparisonFn in the same family."""
        if self.kind == POWER:
            return power_law(self.c ** (-1.0 / self.p), 1.0 / self.p)
        return compose(self.inner.inverted(), self.outer.inverted())

    @property
    def is_kinf(self) -> bool:
        return True

    def to_dict(self) -> dict:
        if self.kind == POWER:
            return {"kind": POWER, "c": self.c, "p": self.p}
        return {"kind": COMPOSITION, "outer": self.outer.to_dict(), "inner": self.inner.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonFn":
        if d["kind"] == POWER:
            return power_law(float(d["c"]), float(d["p"]))
        return compose(cls.from_dict(d["outer"]), cls.from_dict(d["inner"]))


def power_law(c: float, p: float) -> ComparisonFn:
    return ComparisonFn(POWER, float(c), float(p))


def identity() -> ComparisonFn:
    return power_law(1.0, 1.0)


def compose(outer: ComparisonFn, inner: ComparisonFn) -> ComparisonFn:
    """``outer o inner``; class K-infinity is closed under composition."""
    return ComparisonFn(COMPOSITION, outer=outer, inner=inner)


def split_alpha(alpha: ComparisonFn, theta: float = 0.5):
    """Split ``alpha`` into ``(alpha_p, alpha_q)`` with ``alpha_p + alpha_q = alpha``.

    ``alpha_p = theta * alpha`` carries the guaranteed decay and ``alpha_q``
    the remainder reserved for disturbance rejection.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {theta}")
    if alpha.kind == POWER:
        return power_law(theta * alpha.c, alpha.p), power_law((1.0 - theta) * alpha.c, alpha.p)
    return compose(power_law(theta, 1.0), alpha), compose(power_law(1.0 - theta, 1.0), alpha)


@dataclass(frozen=True)
class KLBound:
    """``beta(r, s) = amplitude(r) * exp(-rate * s)``."""

    rate: float
    amplitude: ComparisonFn

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"decay rate must be positive, got {self.rate}")

    def eval(self, r, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("time argument must be nonnegative")
        return _unwrap(np.asarray(self.amplitude(r)) * np.exp(-self.rate * s))

    __call__ = eval

    def to_dict(self) -> dict:
        return {"rate": self.rate, "amplitude": self.amplitude.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "KLBound":
        return cls(float(d["rate"]), ComparisonFn.from_dict(d["amplitude"]))
