"""Bounded exit domains in R^d: axis boxes and balls."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Domain", "box", "ball", "interval"]

BOX, BALL = 0, 1


@dataclass(frozen=True)
class Domain:
    """``kind`` is ``"box"`` (``a`` = lower, ``b`` = upper corner) or ``"ball"``
    (``a`` = center, ``b`` = one-element tuple holding the radius)."""

    kind: str
    a: tuple
    b: tuple

    def __post_init__(self):
        if self.kind == "box":
            if len(self.a) != len(self.b) or not all(lo < hi for lo, hi in zip(self.a, self.b)):
                raise ValueError("box needs lower < upper in every coordinate")
        elif self.kind == "ball":
            if len(self.b) != 1 or not self.b[0] > 0:
                raise ValueError("ball needs a positive radius")
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return len(self.a)

    @property
    def kind_code(self) -> int:
        return BOX if self.kind == "box" else BALL

    def params(self) -> np.ndarray:
        """Flat parameter vector in the layout the path kernels expect."""
        return np.asarray(self.a + self.b, dtype=np.float64)

    def scaled(self, factor: float) -> "Domain":
        """Same center, every half-width (or radius) multiplied by ``factor``."""
        if self.kind == "ball":
            return Domain("ball", self.a, (self.b[0] * factor,))
        c = [(lo + hi) / 2 for lo, hi in zip(self.a, self.b)]
        h = [(hi - lo) / 2 * factor for lo, hi in zip(self.a, self.b)]
        return Domain("box", tuple(ci - hi for ci, hi in zip(c, h)), tuple(ci + hi for ci, hi in zip(c, h)))

    def signed_distance(self, x) -> np.ndarray:
        """Negative inside, zero on the boundary, positive outside."""
        x = np.asarray(x, dtype=float)
        if self.kind == "ball":
            return np.linalg.norm(x - np.asarray(self.a), axis=-1) - self.b[0]
        lo, hi = np.asarray(self.a), np.asarray(self.b)
        q = np.abs(x - (lo + hi) / 2) - (hi - lo) / 2
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def normal(self, x) -> np.ndarray:
        """Outward unit normal at the boundary point nearest ``x``.

        On box edges and corners the axis of largest penetration wins (ties go
        to the lowest axis index).
        """
        x = np.asarray(x, dtype=float)
        if self.kind == "ball":
            v = x - np.asarray(self.a)
            r = np.linalg.norm(v, axis=-1, keepdims=True)
            # the center has no nearest boundary point; use the first axis
            v = np.where(r > 0, v, np.eye(v.shape[-1])[0])
            return v / np.where(r > 0, r, 1.0)
        lo, hi = np.asarray(self.a), np.asarray(self.b)
        c = (lo + hi) / 2
        q = np.abs(x - c) - (hi - lo) / 2
        k = np.argmax(q, axis=-1)
        out = np.zeros_like(x)
        sgn = np.where(np.take_along_axis(x - c, k[..., None], axis=-1) >= 0, 1.0, -1.0)
        np.put_along_axis(out, k[..., None], sgn, axis=-1)
        return out

    def project(self, x) -> np.ndarray:
        """Nearest boundary point along the normal direction."""
        x = np.asarray(x, dtype=float)
        if self.kind == "ball":
            return np.asarray(self.a) + self.b[0] * self.normal(x)
        lo, hi = np.asarray(self.a), np.asarray(self.b)
        out = np.clip(x, lo, hi)
        n = self.normal(x)
        return np.where(n > 0, hi, np.where(n < 0, lo, out))

    def distance_to_boundary(self, x) -> np.ndarray:
        return np.abs(self.signed_distance(x))

    def to_json(self) -> dict:
        if self.kind == "box":
            return {"kind": "box", "lower": list(self.a), "upper": list(self.b)}
        return {"kind": "ball", "center": list(self.a), "radius": self.b[0]}

    @classmethod
    def from_json(cls, obj: dict) -> "Domain":
        if obj["kind"] == "box":
            return box(obj["lower"], obj["upper"])
        if obj["kind"] == "ball":
            return ball(obj["center"], obj["radius"])
        raise ValueError(f"unknown domain kind {obj['kind']!r}")


def box(lower, upper) -> Domain:
    return Domain("box", tuple(float(v) for v in lower), tuple(float(v) for v in upper))


def interval(lo: float, hi: float) -> Domain:
    return box([lo], [hi])


def ball(center, radius: float) -> Domain:
    return Domain("ball", tuple(float(v) for v in center), (float(radius),))
