"""Polarization-resolved fluorescence of a single NV center.

The emission is the incoherent sum of two equal dipoles spanning the plane
normal to the NV axis. Behind a linear analyzer at angle theta the
projection model gives I(theta) = 1 - (n . u(theta))**2 with
u(theta) = (cos theta, sin theta, 0).

Fitted patterns use I(theta) = a0 + r2 cos(2 (theta - phi)); phi is the
analyzer angle of maximum transmission, which sits pi/2 away from the
in-plane projection of the NV axis.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import OrientationClass, SurfaceCut, equivalence_classes, axis_in_lab

FLAT_VISIBILITY = 0.05


class EmissionModel(enum.Enum):
    PROJECTION = "projection"
    HIGH_NA = "high_na"


@dataclass(frozen=True)
class EmissionConfig:
    model: EmissionModel = EmissionModel.PROJECTION
    na: float = 1.45
    immersion_index: float = 1.518
    diamond_index: float = 2.42
    depth_um: float = 20.0
    grid: int = 256

    def __post_init__(self):
        if isinstance(self.model, str):
            object.__setattr__(self, "model", EmissionModel(self.model))
        if not 0.0 < self.na <= self.immersion_index:
            raise ValueError("numerical aperture must satisfy 0 < NA <= immersion index")
        if self.immersion_index <= 1.0 or self.diamond_index <= 1.0:
            raise ValueError("refractive indices must exceed 1")
        if self.grid < 16:
            raise ValueError("cone integration grid needs at least 16 samples per axis")


@dataclass(frozen=True)
class PolarizationPattern:
    angles: np.ndarray
    intensities: np.ndarray
    errors: Optional[np.ndarray] = None

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=float)
        intens = np.asarray(self.intensities, dtype=float)
        if angles.ndim != 1 or angles.shape != intens.shape:
            raise ValueError("angles and intensities must be 1-D arrays of equal length")
        if np.any(angles < 0) or np.any(angles >= math.pi):
            raise ValueError("analyzer angles must lie in [0, pi)")
        if np.any(np.diff(angles) <= 0):
            raise ValueError("analyzer angles must be strictly increasing")
        if np.any(intens < 0):
            raise ValueError("intensities must be non-negative")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "intensities", intens)
        if self.errors is not None:
            object.__setattr__(self, "errors", np.asarray(self.errors, dtype=float))

    def normalized(self) -> "PolarizationPattern":
        mean = float(self.intensities.mean())
        if mean <= 0:
            return self
        errs = None if self.errors is None else self.errors / mean
        return PolarizationPattern(self.angles, self.intensities / mean, errs)

    def to_csv(self) -> str:
        lines = ["theta_rad,intensity"]
        lines += [f"{t!r},{i!r}" for t, i in zip(self.angles.tolist(), self.intensities.tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "PolarizationPattern":
        rows = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if not rows or rows[0].replace(" ", "") != "theta_rad,intensity":
            raise ValueError("pattern CSV must start with header 'theta_rad,intensity'")
        angles, intens = [], []
        for lineno, row in enumerate(rows[1:], start=2):
            parts = row.split(",")
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected two columns")
            try:
                angles.append(float(parts[0]))
                intens.append(float(parts[1]))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        return cls(np.array(angles), np.array(intens))


@dataclass(frozen=True)
class PatternFit:
    a0: float
    r2: float
    azimuth: float
    visibility: float
    residual: float
    a0_err: float = 0.0
    r2_err: float = 0.0
    azimuth_err: float = 0.0

    def curve(self, angles) -> np.ndarray:
        angles = np.asarray(angles, dtype=float)
        return self.a0 + self.r2 * np.cos(2.0 * (angles - self.azimuth))

    def to_dict(self) -> dict:
        return {
            "a0": self.a0,
            "r2": self.r2,
            "azimuth": self.azimuth,
            "visibility": self.visibility,
            "residual": self.residual,
            "a0_err": self.a0_err,
            "r2_err": self.r2_err,
            "azimuth_err": self.azimuth_err,
        }


def uniform_angles(n: int = 19) -> np.ndarray:
    return np.arange(n) * (math.pi / n)


def _check_axis(axis_lab) -> np.ndarray:
    n = np.asarray(axis_lab, dtype=float)
    if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("axis must be a 3-vector of unit norm")
    return n


def _check_angles(angles) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(angles, dtype=float))
    if theta.size == 0:
        raise ValueError("angle list is empty")
    return theta


def projection_intensity(axis_lab, angles) -> np.ndarray:
    n = _check_axis(axis_lab)
    theta = _check_angles(angles)
    proj = n[0] * np.cos(theta) + n[1] * np.sin(theta)
    return 1.0 - proj * proj


def _dipole_pair(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    d1 = np.cross(n, helper)
    d1 /= np.linalg.norm(d1)
    return d1, np.cross(n, d1)


def _cone_fields(n: np.ndarray, config: EmissionConfig):
    """Pupil-plane field components of both dipoles, sampled on the collection cone.

    Returns (weights, ex, ey) with ex/ey of shape (2, N) for the two dipoles.
    """
    n1, n2 = config.diamond_index, config.immersion_index
    theta_max = math.asin(config.na / n2)
    m = config.grid
    th = (np.arange(m) + 0.5) * (theta_max / m)
    ph = (np.arange(m) + 0.5) * (2.0 * math.pi / m)
    TH, PH = np.meshgrid(th, ph, indexing="ij")
    TH, PH = TH.ravel(), PH.ravel()
    sin2, cos2 = np.sin(TH), np.cos(TH)
    sin1 = n2 * sin2 / n1
    cos1 = np.sqrt(1.0 - sin1 * sin1)
    cph, sph = np.cos(PH), np.sin(PH)

    t_s = 2.0 * n1 * cos1 / (n1 * cos1 + n2 * cos2)
    t_p = 2.0 * n1 * cos1 / (n2 * cos1 + n1 * cos2)
    # power transmittance and solid-angle compression share this factor
    g = (n2 * cos2 / (n1 * cos1)) * (n2 * n2 * cos2 / (n1 * n1 * cos1))
    weights = g * sin2 * (theta_max / m) * (2.0 * math.pi / m)

    s_hat = np.stack([-sph, cph, np.zeros_like(PH)])
    p_hat = np.stack([cos1 * cph, cos1 * sph, -sin1])
    ex, ey = [], []
    for d in _dipole_pair(n):
        es = (d @ s_hat) * t_s
        ep = (d @ p_hat) * t_p
        # after collimation p maps onto the pupil radial direction, s stays azimuthal
        ex.append(ep * cph - es * sph)
        ey.append(ep * sph + es * cph)
    return weights, np.array(ex), np.array(ey)


def high_na_intensity(axis_lab, angles, config: EmissionConfig) -> np.ndarray:
    n = _check_axis(axis_lab)
    theta = _check_angles(angles)
    w, ex, ey = _cone_fields(n, config)
    # sum_i |E_i . u|^2 expanded in the pupil components, reduced in fixed order
    xx = float(np.sum(w * (ex * ex).sum(axis=0)))
    yy = float(np.sum(w * (ey * ey).sum(axis=0)))
    xy = float(np.sum(w * (ex * ey).sum(axis=0)))
    c, s = np.cos(theta), np.sin(theta)
    return xx * c * c + yy * s * s + 2.0 * xy * c * s


def pattern(axis_lab, angles, config: EmissionConfig = EmissionConfig()) -> PolarizationPattern:
    """Model polarization pattern for an NV with lab-frame axis ``axis_lab``."""
    theta = _check_angles(angles)
    if config.model is EmissionModel.HIGH_NA:
        values = high_na_intensity(axis_lab, theta, config)
    else:
        values = projection_intensity(axis_lab, theta)
    return PolarizationPattern(theta, np.clip(values, 0.0, None))


def normalized_value(axis_lab, theta: float, config: EmissionConfig = EmissionConfig()) -> float:
    """Pattern value at ``theta`` relative to the pattern's mean over theta."""
    if config.model is EmissionModel.HIGH_NA:
        grid = uniform_angles(64)
        vals = high_na_intensity(axis_lab, np.append(grid, theta), config)
        return float(vals[-1] / vals[:-1].mean())
    n = _check_axis(axis_lab)
    s2 = n[0] * n[0] + n[1] * n[1]
    return float(projection_intensity(n, [theta])[0] / (1.0 - 0.5 * s2))


def collection_efficiency(axis_lab, config: EmissionConfig = EmissionConfig()) -> float:
    """Relative collected power (analyzer removed) for the high-NA geometry."""
    n = _check_axis(axis_lab)
    w, ex, ey = _cone_fields(n, config)
    return float(np.sum(w * (ex * ex + ey * ey).sum(axis=0)))


def pattern_numeric_vs_projection(axis_lab, config: EmissionConfig, n_angles: int = 90) -> float:
    """Largest difference between unit-mean numeric and projection patterns."""
    theta = uniform_angles(n_angles)
    num = high_na_intensity(axis_lab, theta, config)
    proj = projection_intensity(axis_lab, theta)
    return float(np.max(np.abs(num / num.mean() - proj / proj.mean())))


def fit_pattern(p: PolarizationPattern) -> PatternFit:
    """Linear least-squares fit of a0 + r2 cos(2(theta - phi))."""
    theta, y = p.angles, p.intensities
    if theta.size < 5:
        raise ValueError("need at least 5 analyzer angles to fit a pattern")
    if theta[-1] - theta[0] < 0.75 * math.pi - 1e-12:
        raise ValueError("analyzer angles must span at least 3*pi/4")
    if not np.any(y > 0):
        raise ValueError("all intensities are zero")

    A = np.column_stack([np.ones_like(theta), np.cos(2 * theta), np.sin(2 * theta)])
    if p.errors is not None:
        sigma = np.where(p.errors > 0, p.errors, 1.0)
    else:
        sigma = np.ones_like(y)
    Aw = A / sigma[:, None]
    coef, *_ = np.linalg.lstsq(Aw, y / sigma, rcond=None)
    resid = y - A @ coef
    cov = np.linalg.inv(Aw.T @ Aw)
    if p.errors is None:
        dof = max(theta.size - 3, 1)
        scale = float(resid @ resid) / dof
        cov = cov * max(scale, (1e-12 * float(np.abs(y).max())) ** 2)

    a0, c, s = (float(x) for x in coef)
    r2 = math.hypot(c, s)
    phi = (0.5 * math.atan2(s, c)) % math.pi
    if r2 < 1e-12 * max(abs(a0), 1e-300):
        r2, phi = 0.0, 0.0
    if phi >= math.pi - 1e-12:
        phi = 0.0
    # errors along and across the (c, s) direction
    if r2 > 0:
        u = np.array([c, s]) / r2
        v = np.array([-s, c]) / r2
    else:
        u, v = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    cs_cov = cov[1:, 1:]
    r2_err = math.sqrt(max(u @ cs_cov @ u, 0.0))
    perp_err = math.sqrt(max(v @ cs_cov @ v, 0.0))
    az_err = math.pi / 2 if r2 == 0 else min(perp_err / (2 * r2), math.pi / 2)
    vis = 0.0 if a0 <= 0 else min(r2 / a0, 1.0)
    return PatternFit(
        a0=a0,
        r2=r2,
        azimuth=phi,
        visibility=vis,
        residual=float(np.linalg.norm(resid)),
        a0_err=math.sqrt(max(cov[0, 0], 0.0)),
        r2_err=r2_err,
        azimuth_err=az_err,
    )


@dataclass(frozen=True)
class Template:
    orientation: OrientationClass
    visibility: float
    azimuth: float


def class_templates(
    surface: SurfaceCut,
    azimuth_offset: float = 0.0,
    config: EmissionConfig = EmissionConfig(),
) -> list[Template]:
    return list(_templates(surface, float(azimuth_offset), config))


@functools.lru_cache(maxsize=64)
def _templates(surface: SurfaceCut, azimuth_offset: float, config: EmissionConfig) -> tuple[Template, ...]:
    templates = []
    for cls in equivalence_classes(surface, azimuth_offset):
        fit = fit_pattern(pattern(axis_in_lab(cls.members[0], surface), uniform_angles(36), config))
        az = (fit.azimuth + azimuth_offset) % math.pi
        templates.append(Template(cls, fit.visibility, az))
    return tuple(templates)


def _wrap_half_pi(d: float) -> float:
    return (d + math.pi / 2) % math.pi - math.pi / 2


@dataclass(frozen=True)
class Classification:
    orientation: OrientationClass
    margin: float
    distances: tuple[float, ...]
    visibility: float
    reliable: bool
    reason: str = ""

    @property
    def class_id(self) -> int:
        return self.orientation.class_id


def classify(
    fit: PatternFit,
    surface: SurfaceCut,
    azimuth_offset: float = 0.0,
    background: float = 0.0,
    config: EmissionConfig = EmissionConfig(),
    min_margin: float = 4.0,
    k_sigma: float = 5.0,
    max_chi2: float = 25.0,
) -> Classification:
    """Pick the class whose (visibility, azimuth) template is closest in chi-square.

    ``background`` is the uncorrelated level per point in the units of the
    fit; it is removed from a0 before the visibility is compared. The
    margin is the chi-square gap to the runner-up; margins below
    ``min_margin`` (2 sigma) mark the result unreliable, as does a best
    match worse than ``max_chi2`` (the pattern fits no template).
    """
    if fit.a0 <= 0:
        raise ValueError("degenerate fit: a0 <= 0")
    signal = fit.a0 - background
    sig_err = max(fit.a0_err, 1e-12 * fit.a0)
    no_signal = signal <= k_sigma * sig_err
    if no_signal:
        vis, vis_err = 0.0, 1.0
    else:
        vis = fit.r2 / signal
        vis_err = math.hypot(fit.r2_err / signal, fit.r2 * sig_err / signal**2)
        vis_err = max(vis_err, 1e-12)
    az_err = max(fit.azimuth_err, 1e-12)

    distances = []
    templates = class_templates(surface, azimuth_offset, config)
    for t in templates:
        chi2 = ((vis - t.visibility) / vis_err) ** 2
        if t.visibility >= FLAT_VISIBILITY and fit.r2 > 0:
            chi2 += (_wrap_half_pi(fit.azimuth - t.azimuth) / az_err) ** 2
        distances.append(chi2)
    order = sorted(range(len(distances)), key=lambda i: (distances[i], i))
    best = order[0]
    margin = distances[order[1]] - distances[best] if len(order) > 1 else math.inf
    reason = ""
    if no_signal:
        reason = "no emitter signal above background"
    elif margin == 0:
        reason = "tie between classes"
    elif margin < min_margin:
        reason = "margin below threshold"
    elif distances[best] > max_chi2:
        reason = "no template matches"
    return Classification(
        orientation=templates[best].orientation,
        margin=margin,
        distances=tuple(distances),
        visibility=vis,
        reliable=not reason,
        reason=reason,
    )
