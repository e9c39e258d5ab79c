"""NV axes, diamond surface cuts and the lab frame.

Lab frame convention: z is the outward surface normal (the optical axis).
For the (111) cut the x axis is chosen so that the [-1-11] axis projects
onto azimuth 0; for the (100) cut x lies along [011].

Azimuths are reported mod pi because a linear analyzer cannot tell
a direction from its opposite.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

TOL = 1e-12


class SurfaceCut(enum.Enum):
    CUT100 = "100"
    CUT111 = "111"

    @classmethod
    def parse(cls, text) -> "SurfaceCut":
        if isinstance(text, cls):
            return text
        key = str(text).strip().strip("()").lower().replace("cut", "")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown surface cut {text!r} (expected 100 or 111)")


class NvAxis(enum.Enum):
    """The four <111> bond directions an N-V pair can occupy."""

    A111 = (1, 1, 1)
    A1M1M1 = (1, -1, -1)
    AM1M11 = (-1, -1, 1)
    AM11M1 = (-1, 1, -1)

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.value, dtype=float) / math.sqrt(3.0)

    @property
    def label(self) -> str:
        return "[" + "".join("1" if c > 0 else "-1" for c in self.value) + "]"

    @classmethod
    def parse(cls, text) -> "NvAxis":
        if isinstance(text, cls):
            return text
        key = str(text).strip().upper()
        for member in cls:
            if key in (member.name, member.label.upper()):
                return member
        raise ValueError(f"unknown NV axis {text!r}")


AXES = tuple(NvAxis)


def rotation_to_lab(surface: SurfaceCut) -> np.ndarray:
    """Proper rotation matrix R with lab = R @ crystal."""
    if surface is SurfaceCut.CUT111:
        z = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
        x = np.array([-1.0, -1.0, 2.0]) / math.sqrt(6.0)
    elif surface is SurfaceCut.CUT100:
        z = np.array([1.0, 0.0, 0.0])
        x = np.array([0.0, 1.0, 1.0]) / math.sqrt(2.0)
    else:
        raise ValueError(f"unsupported surface {surface!r}")
    y = np.cross(z, x)
    return np.vstack([x, y, z])


def axis_in_lab(axis: NvAxis, surface: SurfaceCut, directed: bool = False) -> np.ndarray:
    """Lab-frame unit vector of ``axis``.

    An NV axis is a line, so by default the returned vector is flipped to
    the upper hemisphere (z >= 0). ``directed=True`` returns the plain
    rotated crystal vector.
    """
    v = rotation_to_lab(surface) @ axis.vector
    if not directed and v[2] < -TOL:
        v = -v
    return v


def axes_in_lab(surface: SurfaceCut) -> list[tuple[NvAxis, np.ndarray]]:
    return [(axis, axis_in_lab(axis, surface)) for axis in AXES]


def in_plane_azimuth(v: np.ndarray, offset: float = 0.0) -> float:
    """Azimuth of the in-plane projection, mod pi. Zero for a vertical vector."""
    if math.hypot(v[0], v[1]) < 1e-9:
        return 0.0
    return (math.atan2(v[1], v[0]) + offset) % math.pi


@dataclass(frozen=True)
class OrientationClass:
    """Set of axes that a polarization measurement cannot tell apart."""

    class_id: int
    members: tuple[NvAxis, ...]
    azimuth: float
    polar_angle: float
    in_plane: float

    @property
    def size(self) -> int:
        return len(self.members)

    def __contains__(self, axis: NvAxis) -> bool:
        return axis in self.members

    @property
    def label(self) -> str:
        return "/".join(a.label for a in self.members)


def _projector_key(v: np.ndarray) -> tuple[float, ...]:
    # In-plane part of n n^T fixes the projection pattern 1 - (n.u)^2.
    return (round(v[0] * v[0], 9), round(v[1] * v[1], 9), round(v[0] * v[1], 9))


def equivalence_classes(surface: SurfaceCut, azimuth_offset: float = 0.0) -> list[OrientationClass]:
    """Partition the four axes into polarization-indistinguishable classes.

    Class ids start at 1 and follow the order of first appearance in AXES.
    ``azimuth_offset`` rotates the lab azimuth origin; it changes the
    reported azimuths but never the partition.
    """
    groups: dict[tuple[float, ...], list[NvAxis]] = {}
    for axis in AXES:
        groups.setdefault(_projector_key(axis_in_lab(axis, surface)), []).append(axis)
    classes = []
    for cid, members in enumerate(groups.values(), start=1):
        rep_lab = axis_in_lab(members[0], surface)
        rep_directed = axis_in_lab(members[0], surface, directed=True)
        classes.append(
            OrientationClass(
                class_id=cid,
                members=tuple(members),
                azimuth=in_plane_azimuth(rep_lab, azimuth_offset),
                polar_angle=math.acos(max(-1.0, min(1.0, rep_directed[2]))),
                in_plane=math.hypot(rep_lab[0], rep_lab[1]),
            )
        )
    return classes


def class_of(axis: NvAxis, surface: SurfaceCut) -> OrientationClass:
    for cls in equivalence_classes(surface):
        if axis in cls:
            return cls
    raise AssertionError("axis not covered by any class")


def get_class(surface: SurfaceCut, class_id: int) -> OrientationClass:
    for cls in equivalence_classes(surface):
        if cls.class_id == class_id:
            return cls
    raise ValueError(f"class {class_id} does not exist for surface {surface.value}")


def resolve_class(surface: SurfaceCut, spec) -> OrientationClass:
    """Look up a class by id or by any member axis name."""
    if isinstance(spec, OrientationClass):
        return spec
    if isinstance(spec, int) or (isinstance(spec, str) and spec.strip().isdigit()):
        return get_class(surface, int(spec))
    return class_of(NvAxis.parse(spec), surface)


def sensitivity_gain(fraction_in_addressed_class: float) -> float:
    """Ensemble sensitivity gain over a randomly oriented array.

    With random orientation a quarter of the centers share any one axis,
    so the gain is the resonantly addressed fraction divided by 1/4.
    """
    f = float(fraction_in_addressed_class)
    if not 0.0 <= f <= 1.0 or math.isnan(f):
        raise ValueError(f"fraction must lie in [0, 1], got {fraction_in_addressed_class}")
    return f / 0.25
