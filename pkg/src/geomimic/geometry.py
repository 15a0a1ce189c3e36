"""Homogeneous-coordinate primitives and geometric error signals.

Error signals are the raw control quantities consumed by training and by
the servo loop: pixel offsets for point coincidence, signed point-line
distances, endpoint residuals for line alignment, and algebraic conic
residuals.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Below this pixel distance two points cannot define a line.
COINCIDENT_TOL_PX = 1e-9
_DEGENERATE_NORM = 1e-12


class KernelKind(str, enum.Enum):
    """Families of geometric association constraints."""

    P2P = "p2p"
    P2L = "p2l"
    L2L = "l2l"
    P2C = "p2c"


# Dimension of the error vector each kind produces.
ERROR_DIM = {
    KernelKind.P2P: 2,
    KernelKind.P2L: 1,
    KernelKind.L2L: 2,
    KernelKind.P2C: 1,
}


class GeometryError(ValueError):
    """Invalid geometric construction."""


class CoincidentPointsError(GeometryError):
    """Two points expected to be distinct nearly coincide."""


@dataclass(frozen=True)
class ImagePoint:
    """A 2D pixel location."""

    u: float
    v: float

    def homogeneous(self) -> np.ndarray:
        return np.array([self.u, self.v, 1.0])

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class HomLine:
    """Line a*u + b*v + c = 0 in normalized homogeneous form.

    Coefficients are rescaled on construction so that a^2 + b^2 = 1 and
    the first nonzero of (a, b) is positive; with that convention
    ``p2l_error`` returns a true signed distance and equal lines compare
    equal coefficient-wise.
    """

    a: float
    b: float
    c: float

    def __post_init__(self) -> None:
        norm = math.hypot(self.a, self.b)
        if norm < _DEGENERATE_NORM:
            raise GeometryError("degenerate line: a and b are both ~0")
        a, b, c = self.a / norm, self.b / norm, self.c / norm
        lead = a if abs(a) > _DEGENERATE_NORM else b
        if lead < 0:
            a, b, c = -a, -b, -c
        object.__setattr__(self, "a", float(a))
        object.__setattr__(self, "b", float(b))
        object.__setattr__(self, "c", float(c))

    def coeffs(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b])


@dataclass(frozen=True)
class Conic:
    """Symmetric 3x3 conic matrix with unit Frobenius norm.

    The overall sign is fixed by making the entry of largest magnitude
    positive, so a conic constructed from the same point set is unique.
    """

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise GeometryError(f"conic matrix must be 3x3, got {m.shape}")
        if not np.allclose(m, m.T, atol=1e-9 * max(1.0, float(np.abs(m).max()))):
            raise GeometryError("conic matrix must be symmetric")
        m = 0.5 * (m + m.T)
        norm = float(np.linalg.norm(m))
        if norm < _DEGENERATE_NORM:
            raise GeometryError("degenerate conic: zero matrix")
        m = m / norm
        flat_idx = int(np.argmax(np.abs(m)))
        if m.flat[flat_idx] < 0:
            m = -m
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class ErrorSignal:
    """Control error produced by one geometric constraint on one frame."""

    kernel_kind: KernelKind
    values: np.ndarray
    frame_index: int = 0

    def __post_init__(self) -> None:
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        expected = ERROR_DIM[self.kernel_kind]
        if vals.shape != (expected,):
            raise GeometryError(
                f"{self.kernel_kind.value} error must have {expected} values, "
                f"got shape {vals.shape}"
            )
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def line_through(p: ImagePoint, q: ImagePoint) -> HomLine:
    """Line through two distinct image points via the homogeneous cross product.

    Raises:
        CoincidentPointsError: if the points are closer than COINCIDENT_TOL_PX.
    """
    if math.hypot(p.u - q.u, p.v - q.v) < COINCIDENT_TOL_PX:
        raise CoincidentPointsError(f"cannot build a line through coincident points {p} and {q}")
    a, b, c = np.cross(p.homogeneous(), q.homogeneous())
    return HomLine(float(a), float(b), float(c))


def conic_through(points: Sequence[ImagePoint]) -> Conic:
    """Conic through exactly five points in general position.

    Points are shifted and scaled before solving so the fit stays
    well-conditioned at pixel scale; the conic is mapped back afterwards.
    """
    if len(points) != 5:
        raise GeometryError(f"conic construction needs exactly 5 points, got {len(points)}")
    pts = np.array([[p.u, p.v] for p in points], dtype=float)
    center = pts.mean(axis=0)
    spread = float(np.sqrt(((pts - center) ** 2).sum(axis=1).mean()))
    if spread < _DEGENERATE_NORM:
        raise GeometryError("conic points are all coincident")
    scale = math.sqrt(2.0) / spread
    x, y = (scale * (pts[:, 0] - center[0]), scale * (pts[:, 1] - center[1]))
    design = np.stack([x * x, x * y, y * y, x, y, np.ones(5)], axis=1)
    _, svals, vt = np.linalg.svd(design)
    # Rank < 5 means several conics fit (e.g. repeated or collinear points).
    if svals[-1] < 1e-9 * svals[0]:
        raise GeometryError("points do not determine a unique conic")
    av, bv, cv, dv, ev, fv = vt[-1]
    normed = np.array(
        [
            [av, bv / 2.0, dv / 2.0],
            [bv / 2.0, cv, ev / 2.0],
            [dv / 2.0, ev / 2.0, fv],
        ]
    )
    # Undo the normalizing similarity: C = T^T C' T with x' = T x.
    t = np.array(
        [
            [scale, 0.0, -scale * center[0]],
            [0.0, scale, -scale * center[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return Conic(t.T @ normed @ t)


def p2p_error(p1: ImagePoint, p2: ImagePoint, frame_index: int = 0) -> ErrorSignal:
    """Pixel offset (du, dv) between two points; zero iff they coincide."""
    return ErrorSignal(
        KernelKind.P2P, np.array([p1.u - p2.u, p1.v - p2.v]), frame_index
    )


def p2l_error(p: ImagePoint, line: HomLine, frame_index: int = 0) -> ErrorSignal:
    """Signed perpendicular distance of a point from a normalized line."""
    value = line.a * p.u + line.b * p.v + line.c
    return ErrorSignal(KernelKind.P2L, np.array([value]), frame_index)


def l2l_error(
    segment: tuple[ImagePoint, ImagePoint], line: HomLine, frame_index: int = 0
) -> ErrorSignal:
    """Signed distances of both segment endpoints from a line.

    Zero iff the segment lies on the line. The endpoints must be distinct
    so the residual really constrains an alignment.
    """
    p, q = segment
    if math.hypot(p.u - q.u, p.v - q.v) < COINCIDENT_TOL_PX:
        raise CoincidentPointsError("segment endpoints coincide")
    d1 = line.a * p.u + line.b * p.v + line.c
    d2 = line.a * q.u + line.b * q.v + line.c
    return ErrorSignal(KernelKind.L2L, np.array([d1, d2]), frame_index)


def p2c_error(p: ImagePoint, conic: Conic, frame_index: int = 0) -> ErrorSignal:
    """Algebraic residual x^T C x of a point against a normalized conic."""
    x = p.homogeneous()
    value = float(x @ conic.matrix @ x)
    return ErrorSignal(KernelKind.P2C, np.array([value]), frame_index)
