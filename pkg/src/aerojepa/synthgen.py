"""Analytic Joukowski-airfoil cases: exact potential-flow C_p and lift, synthetic drag.

The airfoil is the image of a circle through ``z = zeta + 1/zeta``. The circle
passes through ``zeta = 1`` (the trailing-edge cusp), its centre is shifted
left by ``eps`` (thickness) and up by ``m`` (camber). The Kutta condition fixes
the circulation, so the surface speed, C_p and C_L are all closed form.
Coordinates are rescaled to unit chord with the leading edge at ``x = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import qmc

from .errors import GenerationError, GeometryError
from .geometry import PointCloud, signed_area

THICKNESS_RANGE = (0.05, 0.25)
CAMBER_RANGE = (0.0, 0.08)
ALPHA_RANGE = (-0.1, 0.3)
MACH_RANGE = (0.0, 0.7)

DRAG_D0 = 0.02
DRAG_K = 0.05

# thickness ratio of a Joukowski section is ~ (3*sqrt(3)/4) * eps for small eps
_THICKNESS_PER_EPS = 3.0 * np.sqrt(3.0) / 4.0


@dataclass(frozen=True)
class DesignParams:
    thickness: float
    camber: float

    def __post_init__(self):
        for name, value, (lo, hi) in (
            ("thickness", self.thickness, THICKNESS_RANGE),
            ("camber", self.camber, CAMBER_RANGE),
        ):
            if not np.isfinite(value) or not lo <= value <= hi:
                raise GenerationError(f"{name}={value} outside [{lo}, {hi}]")

    def as_array(self) -> np.ndarray:
        return np.array([self.thickness, self.camber])


@dataclass(frozen=True)
class Conditions:
    alpha: float
    mach: float = 0.0

    def __post_init__(self):
        lo, hi = ALPHA_RANGE
        if not np.isfinite(self.alpha) or not lo <= self.alpha <= hi:
            raise GenerationError(f"alpha={self.alpha} outside [{lo}, {hi}]")
        lo, hi = MACH_RANGE
        if not np.isfinite(self.mach) or not lo <= self.mach <= hi:
            raise GenerationError(f"mach={self.mach} outside [{lo}, {hi}]")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.mach])


DESIGN_NAMES = ("thickness", "camber")
CONDITION_NAMES = ("alpha", "mach")


@dataclass(frozen=True)
class Case:
    design: DesignParams
    conditions: Conditions
    geometry: PointCloud
    field: PointCloud
    cl: float
    cd: float
    case_id: int = 0
    design_id: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def coeffs(self):
        return self.cl, self.cd

    @property
    def lift_to_drag(self) -> float:
        return self.cl / self.cd


@dataclass(frozen=True)
class _Section:
    center: complex
    radius: float
    beta: float
    x_le: float
    chord: float


def _section(design: DesignParams) -> _Section:
    eps = design.thickness / _THICKNESS_PER_EPS
    m = 2.0 * design.camber
    if eps <= 0.0:
        raise GenerationError("zero thickness gives a cusped leading edge")
    center = complex(-eps, m)
    radius = abs(1.0 - center)
    beta = float(np.arcsin(m / radius))

    def x_of(theta):
        zeta = center + radius * np.exp(1j * theta)
        return float((zeta + 1.0 / zeta).real)

    res = minimize_scalar(x_of, bounds=(np.pi / 2, 3 * np.pi / 2), method="bounded",
                          options={"xatol": 1e-13})
    x_le = res.fun
    chord = 2.0 - x_le
    if not chord > 0:
        raise GenerationError("degenerate section chord")
    return _Section(center, radius, beta, x_le, chord)


def lift_coefficient(design: DesignParams, conditions: Conditions) -> float:
    """Kutta-Joukowski C_L = 2*Gamma / (U c), with the Prandtl-Glauert factor."""
    sec = _section(design)
    gamma = 4.0 * np.pi * sec.radius * np.sin(conditions.alpha + sec.beta)
    return float(2.0 * gamma / sec.chord / np.sqrt(1.0 - conditions.mach**2))


def drag_coefficient(thickness: float, cl: float) -> float:
    """Synthetic drag polar ``d0 * thickness + k * C_L**2``."""
    return DRAG_D0 * thickness + DRAG_K * cl**2


def contour(design: DesignParams, resolution: int) -> tuple:
    """Unit-chord contour, counter-clockwise from the trailing edge, plus circle angles."""
    sec = _section(design)
    theta = -sec.beta + 2.0 * np.pi * (np.arange(resolution) + 0.5) / resolution
    zeta = sec.center + sec.radius * np.exp(1j * theta)
    z = zeta + 1.0 / zeta
    xy = np.column_stack([(z.real - sec.x_le) / sec.chord, z.imag / sec.chord])
    return xy, theta, zeta, sec


def surface_cp(design: DesignParams, conditions: Conditions, resolution: int) -> tuple:
    xy, theta, zeta, sec = contour(design, resolution)
    a = conditions.alpha
    speed_circle = 2.0 * np.abs(np.sin(theta - a) + np.sin(a + sec.beta))
    jac = np.abs(1.0 - 1.0 / zeta**2)
    cp = 1.0 - (speed_circle / jac) ** 2
    cp = cp / np.sqrt(1.0 - conditions.mach**2)
    return xy, cp


def make_case(design: DesignParams, conditions: Conditions, resolution: int = 512,
              case_id: int = 0, design_id: int = 0) -> Case:
    """Generate one analytic case at the given contour resolution."""
    if resolution < 16:
        raise GenerationError("resolution must be >= 16")
    xy, cp = surface_cp(design, conditions, resolution)
    if not np.all(np.isfinite(cp)):
        raise GenerationError("non-finite surface pressure")
    cl = lift_coefficient(design, conditions)
    cd = drag_coefficient(design.thickness, cl)
    geometry = PointCloud(xy)
    fld = PointCloud(xy, cp[:, None], ("cp",))
    return Case(design, conditions, geometry, fld, cl, cd, case_id=case_id, design_id=design_id)


def integrate_forces(field: PointCloud, alpha: float, orientation: Optional[int] = None,
                     chord: float = 1.0, channel: int = 0) -> tuple:
    """Integrate C_p around a closed ordered contour into (C_L, C_D_pressure).

    Uses midpoint C_p on each polygon edge. ``orientation`` is +1 for
    counter-clockwise and -1 for clockwise; when omitted it is inferred from
    the signed area. Self-intersecting (unordered) contours are rejected.
    """
    xy = field.coords
    if xy.shape[1] != 2 or len(xy) < 3:
        raise GeometryError("force integration needs a closed 2-D contour")
    if field.features is None:
        raise GeometryError("field cloud carries no C_p channel")
    area = signed_area(xy)
    if area == 0.0:
        raise GeometryError("contour encloses zero area")
    inferred = 1 if area > 0 else -1
    if orientation is not None and orientation != inferred:
        raise GeometryError(f"stated orientation {orientation} disagrees with contour ({inferred})")
    if _self_intersects(xy):
        raise GeometryError("contour is unordered (self-intersecting)")
    cp = field.features[:, channel]
    d = np.roll(xy, -1, axis=0) - xy
    cp_mid = 0.5 * (cp + np.roll(cp, -1))
    # outward normal * ds is (dy, -dx) for a CCW contour
    nds = inferred * np.column_stack([d[:, 1], -d[:, 0]])
    force = -np.sum(cp_mid[:, None] * nds, axis=0) / chord
    lift = -force[0] * np.sin(alpha) + force[1] * np.cos(alpha)
    drag = force[0] * np.cos(alpha) + force[1] * np.sin(alpha)
    return float(lift), float(drag)


def _self_intersects(xy: np.ndarray) -> bool:
    a = xy
    b = np.roll(xy, -1, axis=0)
    n = len(xy)

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    A1, B1 = a[:, None], b[:, None]
    A2, B2 = a[None, :], b[None, :]
    d1 = orient(A1, B1, A2)
    d2 = orient(A1, B1, B2)
    d3 = orient(A2, B2, A1)
    d4 = orient(A2, B2, B1)
    cross = (d1 * d2 < 0) & (d3 * d4 < 0)
    i, j = np.indices((n, n))
    adjacent = (np.abs(i - j) <= 1) | (np.abs(i - j) == n - 1)
    return bool(np.any(cross & ~adjacent))


@dataclass(frozen=True)
class Manifest:
    """Split assignment by design id; every case of a design lands in one split."""

    splits: dict
    design_split: dict
    seed: int

    def cases_in(self, split: str) -> list:
        return list(self.splits[split])


def _split_counts(n: int, split: Sequence[float]) -> tuple:
    if len(split) != 3 or any(f < 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {split}")
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def sample_designs(n_designs: int, seed) -> np.ndarray:
    """Space-filling Latin hypercube over (thickness, camber)."""
    sampler = qmc.LatinHypercube(d=2, optimization="random-cd", rng=np.random.default_rng(seed))
    unit = sampler.random(n_designs)
    lo = np.array([THICKNESS_RANGE[0], CAMBER_RANGE[0]])
    hi = np.array([THICKNESS_RANGE[1], CAMBER_RANGE[1]])
    return lo + unit * (hi - lo)


def make_dataset(n_cases: int, split=(0.8, 0.1, 0.1), seed: int = 0, conditions_per_design: int = 1,
                 resolution: int = 512, alpha_range=ALPHA_RANGE, mach: float = 0.0) -> tuple:
    """Build ``n_cases`` cases over ``n_cases // conditions_per_design`` designs.

    Designs come from a seeded Latin hypercube; each design gets its own
    angles of attack (stratified across the dataset). Splits partition the
    designs, so a held-out design never appears in training at any alpha.
    Returns ``(cases, manifest)``.
    """
    if n_cases < 3:
        raise ValueError("n_cases must be >= 3")
    if conditions_per_design < 1 or n_cases % conditions_per_design:
        raise ValueError("n_cases must be a positive multiple of conditions_per_design")
    n_designs = n_cases // conditions_per_design
    counts = _split_counts(n_designs, split)
    ss_design, ss_alpha, ss_split = np.random.SeedSequence(seed).spawn(3)
    designs = sample_designs(n_designs, ss_design)
    alpha_unit = qmc.LatinHypercube(d=1, rng=np.random.default_rng(ss_alpha)).random(n_cases)[:, 0]
    alphas = alpha_range[0] + alpha_unit * (alpha_range[1] - alpha_range[0])
    perm = np.random.default_rng(ss_split).permutation(n_designs)
    names = ("train", "val", "test")
    design_split = {}
    start = 0
    for name, count in zip(names, counts):
        for d in perm[start:start + count]:
            design_split[int(d)] = name
        start += count

    cases = []
    splits = {name: [] for name in names}
    for d in range(n_designs):
        dp = DesignParams(float(designs[d, 0]), float(designs[d, 1]))
        for j in range(conditions_per_design):
            cid = d * conditions_per_design + j
            cond = Conditions(float(alphas[cid]), mach)
            cases.append(make_case(dp, cond, resolution, case_id=cid, design_id=d))
            splits[design_split[d]].append(cid)
    return cases, Manifest(splits, design_split, int(seed))
