"""Photon statistics: shot noise, antibunched streams, HBT histograms, g2 fits
and confocal image synthesis.

Time units: photon arrival streams are in seconds, g2 delays and lifetimes
in nanoseconds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage, optimize


@dataclass(frozen=True)
class CountTrace:
    bin_width: float
    counts: np.ndarray
    start: float = 0.0

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if self.bin_width <= 0:
            raise ValueError("bin width must be positive")
        if counts.size and (counts.min() < 0 or not np.issubdtype(counts.dtype, np.integer)):
            raise ValueError("counts must be non-negative integers")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def times(self) -> np.ndarray:
        """Bin start times."""
        return self.start + self.bin_width * np.arange(self.counts.size)

    def rates(self) -> np.ndarray:
        return self.counts / self.bin_width


def sample_counts(rate: float, dwell: float, rng: np.random.Generator) -> int:
    """Poisson shot-noise counts for a constant rate over ``dwell`` seconds."""
    if rate < 0:
        raise ValueError("count rate must be non-negative")
    if dwell <= 0:
        raise ValueError("dwell must be positive")
    return int(rng.poisson(rate * dwell))


# ---------------------------------------------------------------- g2 model


@dataclass(frozen=True)
class G2Params:
    a: float = 0.5
    tau1: float = 10.0
    tau2: float = 100.0

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("bunching amplitude must be >= 0")
        if self.tau1 <= 0 or self.tau2 <= self.tau1:
            raise ValueError("need 0 < tau1 < tau2")


def g2_model(tau, p: G2Params):
    """Three-level antibunching curve; g2(0) = 0 and g2 -> 1 at long delay."""
    t = np.abs(np.asarray(tau, dtype=float))
    out = 1.0 - (1.0 + p.a) * np.exp(-t / p.tau1) + p.a * np.exp(-t / p.tau2)
    return float(out) if out.ndim == 0 else out


def mix_g2(g_emitter, rho: float):
    """g2 seen through uncorrelated background, signal fraction ``rho``."""
    return 1.0 - rho * rho + rho * rho * np.asarray(g_emitter)


def background_correct(g_meas, rho: float):
    """Invert ``mix_g2``: (g - (1 - rho^2)) / rho^2."""
    rho = np.asarray(rho, dtype=float)
    if not np.all((rho > 0.0) & (rho <= 1.0)):
        raise ValueError("signal fraction must lie in (0, 1]")
    out = (np.asarray(g_meas, dtype=float) - (1.0 - rho * rho)) / (rho * rho)
    return float(out) if out.ndim == 0 else out


def _bin_mean_exp(centers: np.ndarray, width: float, tau: float) -> np.ndarray:
    """Mean of exp(-|t|/tau) over each bin [c - w/2, c + w/2]."""
    c = np.abs(centers)
    h = 0.5 * width
    x = h / tau
    outside = np.exp(-c / tau) * (np.sinh(x) / x)
    # bins that straddle zero
    lo, hi = c - h, c + h
    inside = tau * (2.0 - np.exp(-np.maximum(-lo, 0) / tau) - np.exp(-hi / tau)) / width
    return np.where(lo < 0, inside, outside)


def g2_bin_average(centers, width: float, p: G2Params, depth: float = 1.0) -> np.ndarray:
    """Mixed g2 averaged over histogram bins; ``depth`` = rho^2."""
    centers = np.atleast_1d(np.asarray(centers, dtype=float))
    e1 = _bin_mean_exp(centers, width, p.tau1)
    e2 = _bin_mean_exp(centers, width, p.tau2)
    return 1.0 - depth * ((1.0 + p.a) * e1 - p.a * e2)


def zero_bin_g2(p: G2Params, width: float) -> float:
    """Emitter g2 averaged over the zero-delay bin of a given width."""
    return float(g2_bin_average([0.0], width, p)[0])


# ------------------------------------------------------ three-level emitter


@dataclass(frozen=True)
class EmitterRates:
    """Transition rates (1/ns): ground->excited, radiative, ISC, shelf->ground."""

    k_ge: float
    k_eg: float
    k_es: float
    k_sg: float

    @property
    def photon_rate(self) -> float:
        """Stationary emission rate in photons per second."""
        p = self.k_ge * self.k_es + (self.k_ge + self.k_eg + self.k_es) * self.k_sg
        return self.k_eg * self.k_ge * self.k_sg / p * 1e9


def emitter_rates(p: G2Params) -> EmitterRates:
    """Three-level rates that reproduce ``g2_model(., p)`` exactly.

    The two decay constants and the slope at zero delay fix three of the
    four rates; the radiative rate takes the midpoint of its feasible range.
    """
    l1, l2 = 1.0 / p.tau1, 1.0 / p.tau2
    k_sg = l1 * l2 / ((1.0 + p.a) * l1 - p.a * l2)
    total = l1 + l2 - k_sg
    prod = max((l1 - k_sg) * (l2 - k_sg), 0.0)
    k_eg = 0.5 * (total - 2.0 * math.sqrt(prod))
    rest = total - k_eg
    disc = math.sqrt(max(rest * rest - 4.0 * prod, 0.0))
    k_ge = 0.5 * (rest + disc)
    k_es = 0.5 * (rest - disc)
    return EmitterRates(k_ge=k_ge, k_eg=k_eg, k_es=k_es, k_sg=k_sg)


def _emitter_arrivals(p: G2Params, rate: float, duration: float, rng: np.random.Generator) -> np.ndarray:
    r = emitter_rates(p)
    eta = rate / r.photon_rate
    if eta > 1.0:
        raise ValueError(
            f"signal rate {rate:g}/s exceeds the emitter's photon rate {r.photon_rate:g}/s"
        )
    k_e = r.k_eg + r.k_es
    p_emit = r.k_eg / k_e
    chunk = max(int(rate * duration * 1.05) + 64, 256)
    out, t_end = [], 0.0
    while t_end <= duration:
        # emissions per detection, then shelving excursions among them
        n = rng.geometric(eta, size=chunk)
        m = rng.negative_binomial(n, p_emit) if p_emit < 1.0 else np.zeros_like(n)
        dt_ns = (
            rng.gamma(n + m, 1.0 / r.k_ge)
            + rng.gamma(n + m, 1.0 / k_e)
            + rng.gamma(m, 1.0 / r.k_sg)
        )
        t = t_end + np.cumsum(dt_ns * 1e-9)
        out.append(t)
        t_end = float(t[-1])
    times = np.concatenate(out)
    return times[times < duration]


def simulate_photon_stream(
    p: G2Params,
    signal_rate: float,
    background_rate: float,
    duration: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sorted arrival times (s) of one antibunched emitter plus Poisson background."""
    if signal_rate < 0 or background_rate < 0:
        raise ValueError("rates must be non-negative")
    if duration <= 0:
        return np.empty(0)
    parts = []
    if signal_rate > 0:
        parts.append(_emitter_arrivals(p, signal_rate, duration, rng))
    if background_rate > 0:
        n_bg = int(rng.poisson(background_rate * duration))
        parts.append(rng.uniform(0.0, duration, size=n_bg))
    if not parts:
        return np.empty(0)
    return np.sort(np.concatenate(parts), kind="stable")


# ------------------------------------------------------------ histogramming


@dataclass(frozen=True)
class HbtHistogram:
    edges: np.ndarray
    counts: np.ndarray
    duration: float
    n1: int
    n2: int
    mode: str = "full"
    norm_value: Optional[float] = None

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def norm(self) -> float:
        """Expected coincidences per bin for uncorrelated streams."""
        if self.norm_value is not None:
            return self.norm_value
        if self.n1 == 0 or self.n2 == 0:
            return 0.0
        return self.n1 * self.n2 * self.bin_width * 1e-9 / self.duration

    @property
    def g2(self) -> np.ndarray:
        if self.norm == 0:
            return np.zeros_like(self.counts, dtype=float)
        return self.counts / self.norm

    def to_csv(self) -> str:
        lines = ["tau_ns,coincidences,g2_norm"]
        for t, c, g in zip(self.centers.tolist(), self.counts.tolist(), self.g2.tolist()):
            lines.append(f"{t!r},{c},{g!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "HbtHistogram":
        """Read ``to_csv`` output; the normalization is recovered from its columns."""
        lines = [r for r in text.strip().splitlines() if r.strip()]
        if not lines or lines[0].strip() != "tau_ns,coincidences,g2_norm":
            raise ValueError("expected header tau_ns,coincidences,g2_norm")
        try:
            rows = [tuple(float(v) for v in r.split(",")) for r in lines[1:]]
        except ValueError:
            raise ValueError("non-numeric histogram row") from None
        if len(rows) < 2 or any(len(r) != 3 for r in rows):
            raise ValueError("histogram needs at least two rows of three columns")
        tau, counts, g = (np.array(c) for c in zip(*rows))
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise ValueError("coincidences must be non-negative integers")
        w = tau[1] - tau[0]
        if w <= 0 or not np.allclose(np.diff(tau), w, rtol=1e-9, atol=1e-9):
            raise ValueError("delays must be evenly spaced and increasing")
        ok = g > 0
        norm = float(np.median(counts[ok] / g[ok])) if ok.any() else 0.0
        edges = np.append(tau - 0.5 * w, tau[-1] + 0.5 * w)
        return cls(edges, counts.astype(np.int64), 1.0, 0, 0, norm_value=norm)


def symmetric_edges(bin_width: float, max_delay: float) -> np.ndarray:
    """Bin edges (ns) with a bin centered on zero delay."""
    if bin_width <= 0 or max_delay < bin_width:
        raise ValueError("need 0 < bin_width <= max_delay")
    n = int(round(max_delay / bin_width))
    return (np.arange(-n, n + 2) - 0.5) * bin_width


def histogram_coincidences(
    stream: np.ndarray,
    splitter_rng: np.random.Generator,
    bin_width: float = 1.0,
    max_delay: float = 200.0,
    duration: Optional[float] = None,
    start_stop: bool = False,
) -> HbtHistogram:
    """Split arrivals 50/50 onto two detectors and histogram t2 - t1 (ns)."""
    stream = np.asarray(stream, dtype=float)
    if stream.size == 0:
        raise ValueError("empty photon stream")
    if np.any(np.diff(stream) < 0):
        raise ValueError("photon stream must be sorted")
    if duration is None:
        duration = float(stream[-1]) if stream[-1] > 0 else 1.0
    edges = symmetric_edges(bin_width, max_delay)
    lo_edge, nbins = edges[0], edges.size - 1
    to_det1 = splitter_rng.random(stream.size) < 0.5
    t1, t2 = stream[to_det1], stream[~to_det1]
    counts = np.zeros(nbins, dtype=np.int64)

    def accumulate(delays_ns):
        idx = np.floor((delays_ns - lo_edge) / bin_width).astype(np.int64)
        ok = (idx >= 0) & (idx < nbins)
        counts[:] += np.bincount(idx[ok], minlength=nbins)

    if t1.size and t2.size:
        span = (-lo_edge) * 1e-9
        if start_stop:
            j = np.searchsorted(t2, t1, side="left")
            ok = j < t2.size
            accumulate((t2[j[ok]] - t1[ok]) * 1e9)
            i = np.searchsorted(t1, t2, side="right")
            ok = i < t1.size
            accumulate(-(t1[i[ok]] - t2[ok]) * 1e9)
        else:
            lo = np.searchsorted(t2, t1 - span, side="left")
            hi = np.searchsorted(t2, t1 + span, side="right")
            width = hi - lo
            for k in range(int(width.max()) if width.size else 0):
                sel = width > k
                accumulate((t2[lo[sel] + k] - t1[sel]) * 1e9)
    return HbtHistogram(
        edges=edges,
        counts=counts,
        duration=float(duration),
        n1=int(t1.size),
        n2=int(t2.size),
        mode="start-stop" if start_stop else "full",
    )


# -------------------------------------------------------------- g2 fitting


@dataclass(frozen=True)
class G2Fit:
    params: G2Params
    depth: float
    depth_err: float
    g2_zero_raw: float
    g2_zero_corrected: float
    rho: float
    rho_fitted: bool
    chi2_red: float
    converged: bool
    message: str = ""

    @property
    def g2_zero_point(self) -> float:
        """Mixed model at exactly zero delay, 1 - depth."""
        return 1.0 - self.depth

    def to_dict(self) -> dict:
        return {
            "a": self.params.a,
            "tau1_ns": self.params.tau1,
            "tau2_ns": self.params.tau2,
            "depth": self.depth,
            "rho": self.rho,
            "rho_fitted": self.rho_fitted,
            "g2_zero_raw": self.g2_zero_raw,
            "g2_zero_corrected": self.g2_zero_corrected,
            "chi2_red": self.chi2_red,
            "converged": self.converged,
        }


def fit_g2(h: HbtHistogram, rho: Optional[float] = None, max_nfev: int = 2000) -> G2Fit:
    """Weighted least-squares fit of the bin-averaged mixed three-level model.

    The dip depth (rho^2 for an ideal emitter) is always a free parameter so
    that g2(0) comes from the data. The reported raw g2(0) is the fitted
    curve averaged over the zero-delay bin; it is background-corrected with
    ``rho`` when supplied, otherwise with sqrt(depth).
    """
    centers, w = h.centers, h.bin_width
    if centers.size < 20:
        raise ValueError("need at least 20 histogram bins")
    y = h.g2
    if h.norm <= 0:
        raise ValueError("histogram has no counts on one detector")
    sigma = np.sqrt(np.maximum(h.counts, 1.0)) / h.norm
    span = float(centers.max())

    def unpack(x):
        depth, a, log_t1, log_ratio = x
        t1 = math.exp(log_t1)
        return depth, G2Params(a=a, tau1=t1, tau2=t1 * (1.0 + math.exp(log_ratio)))

    def residuals(x):
        depth, p = unpack(x)
        return (g2_bin_average(centers, w, p, depth) - y) / sigma

    near = np.abs(centers) <= 3 * w
    d0 = float(np.clip(1.0 - y[near].mean(), 0.05, 1.0))
    lo = [0.0, 0.0, math.log(max(w / 20, 1e-3)), math.log(1e-2)]
    hi = [1.0, 50.0, math.log(span), math.log(1e4)]
    best = None
    for t1_guess in (span / 40, span / 15, span / 6):
        for a_guess in (0.0, 0.5):
            x0 = np.clip([d0, a_guess, math.log(t1_guess), math.log(9.0)], lo, hi)
            x0 = np.minimum(np.maximum(x0, np.array(lo) + 1e-9), np.array(hi) - 1e-9)
            res = optimize.least_squares(residuals, x0, bounds=(lo, hi), max_nfev=max_nfev, x_scale="jac")
            if best is None or res.cost < best.cost:
                best = res
    depth, p = unpack(best.x)
    dof = max(centers.size - 4, 1)
    chi2_red = 2.0 * best.cost / dof
    try:
        J = best.jac
        cov = np.linalg.pinv(J.T @ J)
        depth_err = math.sqrt(max(cov[0, 0], 0.0) * max(chi2_red, 1.0))
    except np.linalg.LinAlgError:
        depth_err = math.inf
    message = best.message
    if depth < max(3.0 * depth_err, 0.02):
        # no resolvable dip: shape parameters are unidentifiable
        p = G2Params(a=0.0, tau1=p.tau1, tau2=p.tau2)
        message = "no significant antibunching dip"
        g_raw = float(np.average(y[near], weights=sigma[near] ** -2))
    else:
        if 5.0 * p.tau1 > span:
            message = "delay span shorter than 5 tau1"
        g_raw = float(g2_bin_average([0.0], w, p, depth)[0])
    rho_used = rho if rho is not None else math.sqrt(max(depth, 1e-12))
    return G2Fit(
        params=p,
        depth=depth,
        depth_err=depth_err,
        g2_zero_raw=g_raw,
        g2_zero_corrected=background_correct(g_raw, min(rho_used, 1.0)),
        rho=rho_used,
        rho_fitted=rho is None,
        chi2_red=chi2_red,
        converged=bool(best.status > 0),
        message=message,
    )


# ---------------------------------------------------------- confocal images


@dataclass(frozen=True)
class ConfocalImage:
    data: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def local_maxima(self, threshold: float) -> list[tuple[float, float]]:
        """(x, y) of pixels that are the maximum of their 3x3 neighbourhood."""
        peak = ndimage.maximum_filter(self.data, size=3, mode="nearest") == self.data
        rows, cols = np.nonzero(peak & (self.data > threshold))
        return [(float(self.x[c]), float(self.y[r])) for r, c in zip(rows, cols)]

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(v) for v in row) for row in self.data.tolist()) + "\n"

    def to_pgm(self) -> bytes:
        peak = float(self.data.max())
        scaled = np.zeros_like(self.data) if peak <= 0 else self.data / peak * 65535.0
        pix = np.round(scaled).astype(">u2")
        h, w = pix.shape
        return f"P5\n{w} {h}\n65535\n".encode("ascii") + pix.tobytes()


def synthesize_confocal_image(
    emitters: Sequence[tuple[float, float, float]],
    psf_sigma: float = 0.25,
    region: tuple[float, float, float, float] = (-1.0, -1.0, 1.0, 1.0),
    pixel_pitch: float = 0.1,
    background: float = 0.0,
) -> ConfocalImage:
    """Sum of isotropic Gaussian spots on a pixel grid.

    Each spot peaks at its emitter's brightness, so its integrated flux is
    brightness * 2 pi sigma^2. Pixel centers run from (x0, y0) in steps of
    ``pixel_pitch`` up to (x1, y1); rows follow y.
    """
    if psf_sigma <= 0 or pixel_pitch <= 0:
        raise ValueError("psf sigma and pixel pitch must be positive")
    x0, y0, x1, y1 = region
    if x1 <= x0 or y1 <= y0:
        raise ValueError("empty region")
    x = x0 + pixel_pitch * np.arange(int(math.floor((x1 - x0) / pixel_pitch + 1e-9)) + 1)
    y = y0 + pixel_pitch * np.arange(int(math.floor((y1 - y0) / pixel_pitch + 1e-9)) + 1)
    img = np.full((y.size, x.size), float(background))
    inv = 1.0 / (2.0 * psf_sigma * psf_sigma)
    for ex, ey, b in emitters:
        gx = np.exp(-((x - ex) ** 2) * inv)
        gy = np.exp(-((y - ey) ** 2) * inv)
        img += b * np.outer(gy, gx)
    return ConfocalImage(img, x, y)


# ------------------------------------------------------------ experiments


@dataclass(frozen=True)
class G2Experiment:
    """One simulated HBT run: emitter, rates (1/s), acquisition and binning (ns).

    ``rho`` is the signal fraction used for background correction; by
    default it is taken from the rates, as an experimenter would from the
    count-rate trace.
    """

    params: G2Params = field(default_factory=lambda: G2Params(a=0.5, tau1=20.0, tau2=200.0))
    signal_rate: float = 3.6e6
    background_rate: float = 4e5
    duration_s: float = 0.2
    bin_ns: float = 1.0
    max_delay_ns: float = 1000.0
    start_stop: bool = False
    rho: Optional[float] = None

    def __post_init__(self):
        if self.signal_rate < 0 or self.background_rate < 0:
            raise ValueError("rates must be non-negative")
        if self.signal_rate + self.background_rate <= 0:
            raise ValueError("total count rate must be positive")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")

    @property
    def signal_fraction(self) -> float:
        if self.rho is not None:
            return self.rho
        return self.signal_rate / (self.signal_rate + self.background_rate)

    @property
    def truth(self) -> float:
        """Background-free g2 averaged over the zero-delay bin."""
        return zero_bin_g2(self.params, self.bin_ns)


def run_g2_trial(exp: G2Experiment, seed: int, trial: int = 0) -> tuple[HbtHistogram, G2Fit]:
    from . import rng as rngmod

    stream = simulate_photon_stream(
        exp.params,
        exp.signal_rate,
        exp.background_rate,
        exp.duration_s,
        rngmod.stream(seed, rngmod.STREAM_PHOTONS, trial),
    )
    hist = histogram_coincidences(
        stream,
        rngmod.stream(seed, rngmod.STREAM_SPLITTER, trial),
        bin_width=exp.bin_ns,
        max_delay=exp.max_delay_ns,
        duration=exp.duration_s,
        start_stop=exp.start_stop,
    )
    return hist, fit_g2(hist, rho=exp.signal_fraction)


def tau1_for_zero_bin(target: float, a: float, tau2: float, width: float) -> float:
    """Antibunching time whose zero-bin average equals ``target``."""
    def f(t1):
        return zero_bin_g2(G2Params(a=a, tau1=t1, tau2=tau2), width) - target

    hi = tau2 * (1 - 1e-9)
    lo = width * 1e-3
    if f(lo) * f(hi) > 0:
        raise ValueError("target not reachable for these parameters")
    return float(optimize.brentq(f, lo, hi, xtol=1e-12))
