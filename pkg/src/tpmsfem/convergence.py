"""Solution verification: relative error, observed order, Richardson
extrapolation, grid convergence index and power-law density fits.

Grid triples are indexed fine to coarse: ``f1`` on the finest mesh (``h1``),
``f3`` on the coarsest, with a constant refinement ratio ``r = h2/h1 = h3/h2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateFit, DegenerateOrder, NonMonotoneTriple, NonPositivePoint, ZeroDifference,
                     ZeroGci, ZeroReference)

CONVENTIONS = ("paper", "roache")


def default_safety_factor(n_grids):
    """1.25 for three or more grids, 3.0 for two."""
    return 1.25 if n_grids >= 3 else 3.0


def relative_error(f_fine, f_coarse):
    """Percentage change between neighbouring meshes, relative to the finer."""
    if f_fine == 0:
        raise ZeroReference("relative error needs a nonzero fine-mesh result")
    return abs(f_coarse - f_fine) / abs(f_fine) * 100.0


def observed_order(f1, f2, f3, r):
    if r <= 1:
        raise ValueError(f"refinement ratio must exceed 1, got {r}")
    d21, d32 = f2 - f1, f3 - f2
    if d21 == 0 or d32 == 0:
        raise ZeroDifference("successive solutions are identical; order is undefined")
    if (d21 > 0) != (d32 > 0):
        raise NonMonotoneTriple(f"oscillatory convergence ({f1}, {f2}, {f3}); GCI does not apply")
    return math.log(d32 / d21) / math.log(r)


def richardson(f1, f2, r, p):
    """Extrapolated zero-spacing value from the two finest solutions."""
    denom = r ** p - 1.0
    if abs(denom) < 1e-12:
        raise DegenerateOrder(f"r^p - 1 = {denom:.3g} is too close to zero")
    return f1 + (f1 - f2) / denom


def gci_pair(f_fine, f_coarse, f_ref, r, p, F_s=1.25):
    """Grid convergence index (%) of one mesh pair; ``f_ref`` is the error
    denominator (see :data:`CONVENTIONS`)."""
    if f_ref == 0:
        raise ZeroReference("GCI needs a nonzero reference value")
    denom = r ** p - 1.0
    if denom <= 1e-12:
        raise DegenerateOrder(f"r^p - 1 = {denom:.3g} must be positive")
    return F_s * (abs(f_coarse - f_fine) / abs(f_ref)) / denom * 100.0


def asymptotic_ratio(gci12, gci23, r, p):
    if gci12 <= 0:
        raise ZeroGci("fine-pair GCI is zero; asymptotic ratio undefined")
    return gci23 / (r ** p * gci12)


@dataclass
class MeshStudy:
    """Series of (element size, result) pairs ordered coarse to fine."""

    h: list
    f: list
    label: str = ""

    def __post_init__(self):
        self.h = [float(v) for v in self.h]
        self.f = [float(v) for v in self.f]
        if len(self.h) != len(self.f):
            raise ValueError("h and f must have equal length")
        if any(v <= 0 for v in self.h):
            raise ValueError("element sizes must be positive")
        if any(b >= a for a, b in zip(self.h, self.h[1:])):
            raise ValueError("element sizes must be strictly decreasing")

    def __len__(self):
        return len(self.h)

    @classmethod
    def from_pairs(cls, pairs, label=""):
        pairs = sorted(pairs, key=lambda hf: -hf[0])
        return cls([p[0] for p in pairs], [p[1] for p in pairs], label)

    def ratios(self):
        return [a / b for a, b in zip(self.h, self.h[1:])]

    def relative_errors(self):
        """Percentage change at each refinement step (first entry has none)."""
        return [relative_error(fine, coarse) for coarse, fine in zip(self.f, self.f[1:])]

    def triple(self, r=None, tol=1e-9):
        """Three-grid sub-study at constant ratio, anchored on the finest mesh.

        With exactly three entries the study itself is returned (after the
        ratio check). Otherwise ``r`` (default 2) selects ``h1, r h1, r^2 h1``.
        """
        if len(self) == 3 and r is None:
            r1, r2 = self.ratios()
            if abs(r1 - r2) > tol * max(r1, r2):
                raise ValueError(f"refinement ratios differ ({r1:.12g} vs {r2:.12g})")
            return self
        r = 2.0 if r is None else float(r)
        h = np.array(self.h)
        for i1 in range(len(h) - 1, -1, -1):
            picks = [i1]
            for k in (1, 2):
                match = np.flatnonzero(np.abs(h - h[i1] * r ** k) <= tol * h[i1] * r ** k)
                if match.size == 0:
                    break
                picks.append(int(match[0]))
            if len(picks) == 3:
                idx = picks[::-1]
                return MeshStudy([self.h[i] for i in idx], [self.f[i] for i in idx], self.label)
        raise ValueError(f"no three grids at constant ratio {r} in {self.h}")


@dataclass
class GciReport:
    label: str
    convention: str
    p: float
    f_asym: float
    gci12: float
    gci23: float
    Ra: float
    F_s: float
    r: float
    h: tuple = field(default=())
    f: tuple = field(default=())

    HEADER = ("label", "convention", "p", "f_asym", "gci12_pct", "gci23_pct", "Ra")

    @property
    def ra_informative(self):
        # identically 1 under the common-denominator convention
        return self.convention != "paper"

    def row(self):
        return [self.label, self.convention, self.p, self.f_asym, self.gci12, self.gci23, self.Ra]


def gci_report(study: MeshStudy, F_s=None, convention="paper") -> GciReport:
    """Observed order, extrapolated value, both GCIs and the asymptotic ratio
    of a three-grid study."""
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    if len(study) != 3:
        raise ValueError(f"GCI needs exactly three grids, got {len(study)}")
    tri = study.triple()
    h3, h2, h1 = tri.h
    f3, f2, f1 = tri.f
    r = h2 / h1
    F_s = default_safety_factor(3) if F_s is None else F_s
    p = observed_order(f1, f2, f3, r)
    f_asym = richardson(f1, f2, r, p)
    if convention == "paper":
        gci12 = gci_pair(f1, f2, f1, r, p, F_s)
        gci23 = gci_pair(f2, f3, f1, r, p, F_s)
    else:
        gci12 = gci_pair(f1, f2, f1, r, p, F_s)
        gci23 = gci_pair(f2, f3, f2, r, p, F_s)
    Ra = asymptotic_ratio(gci12, gci23, r, p)
    return GciReport(study.label, convention, p, f_asym, gci12, gci23, Ra, F_s, r, (h1, h2, h3), (f1, f2, f3))


@dataclass
class GibsonAshbyFit:
    """``E/E_s = C1 * RD**m`` fitted in log-log space."""

    C1: float
    m: float
    r2: float
    n_points: int = 0

    HEADER = ("C1", "m", "R2", "n")

    def predict(self, rd):
        return self.C1 * np.asarray(rd, dtype=float) ** self.m

    def row(self):
        return [self.C1, self.m, self.r2, self.n_points]


def fit_gibson_ashby(points) -> GibsonAshbyFit:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("need at least two (RD, E/E_s) points")
    bad = np.flatnonzero(np.any(pts <= 0, axis=1))
    if bad.size:
        raise NonPositivePoint(f"point {int(bad[0])} {tuple(pts[bad[0]])} is not strictly positive")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(x) == 0:
        raise DegenerateFit("all relative densities are equal")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return GibsonAshbyFit(float(np.exp(intercept)), float(slope), r2, len(pts))
