"""Synthetic cardiac phantoms with analytically known deformations.

Geometry (voxel units): a spherical LV blood pool inside a spherical
myocardial shell, and an RV crescent cut from a second sphere offset from the
LV centre. Under sliding motion the LV keeps to one side of the plane and the
RV sphere fills the other side up to the plane. Labels are evaluated
analytically in both frames, so they are exact
ground truth; the fixed image is the moving image resampled through the
ground-truth deformation.

Deformation convention matches the warp module: ``fixed(x) = moving(phi(x))``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..grid import BACKGROUND, LVBP, LVM, RV, Grid, LabelMap, VectorField, Volume
from ..warp import warp_volume

INTENSITY = {BACKGROUND: 0.2, LVBP: 1.0, LVM: 0.6, RV: 0.8}
MAX_MOTION = 4.0
MOTIONS = ("rigid_shift", "contraction", "sliding")


class PhantomSpecError(ValueError):
    pass


@dataclass
class Geometry:
    lv_center: tuple[float, float, float]
    lvbp_radius: float = 5.0
    lvm_thickness: float = 3.0
    rv_offset: tuple[float, float, float] = (0.0, 6.0, 0.0)
    rv_radius: float = 8.0

    @property
    def lvm_radius(self) -> float:
        return self.lvbp_radius + self.lvm_thickness

    @classmethod
    def default(cls, grid: Grid) -> "Geometry":
        s = min(grid.extents) / 32.0
        center = tuple((n - 1) / 2.0 for n in grid.extents)
        return cls(center, 5.0 * s, 3.0 * s, (0.0, 6.0 * s, 0.0), 8.0 * s)


@dataclass
class Motion:
    kind: str = "rigid_shift"
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)  # rigid_shift: constant displacement
    scale: float = 1.0  # contraction: LV blood-pool radius ratio fixed / moving
    axis: int = 1  # sliding: plane normal axis
    offset: float | None = None  # sliding: plane position along axis (None: through the RV sphere centre)
    translation_a: tuple[float, float, float] = (3.0, 0.0, 0.0)  # side coord < offset
    translation_b: tuple[float, float, float] = (-3.0, 0.0, 0.0)  # side coord >= offset


@dataclass
class PhantomSpec:
    grid: Grid
    geometry: Geometry | None = None
    motion: Motion = field(default_factory=Motion)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.geometry is None:
            self.geometry = Geometry.default(self.grid)
        if self.motion.kind == "sliding" and self.motion.offset is None:
            g = self.geometry
            self.motion.offset = float(g.lv_center[self.motion.axis] + g.rv_offset[self.motion.axis])
        self.validate()

    def validate(self) -> None:
        g, m = self.geometry, self.motion
        if not (g.lvbp_radius > 0 and g.rv_radius > 0):
            raise PhantomSpecError("invariant violated: radii must be positive (lvbp_radius, rv_radius)")
        if not g.lvm_thickness > 0:
            raise PhantomSpecError(
                "invariant violated: LVM must strictly enclose LVBP "
                f"(lvm outer radius {g.lvm_radius:g} <= lvbp_radius {g.lvbp_radius:g})"
            )
        if self.noise_sigma < 0:
            raise PhantomSpecError("invariant violated: noise_sigma must be >= 0")
        if m.kind not in MOTIONS:
            raise PhantomSpecError(f"unknown motion kind {m.kind!r}; expected one of {MOTIONS}")
        if max_motion(self) > MAX_MOTION + 1e-12:
            raise PhantomSpecError(
                f"invariant violated: motion magnitude {max_motion(self):.3g} exceeds {MAX_MOTION:g} voxels"
            )
        if m.kind == "contraction" and not m.scale > 0:
            raise PhantomSpecError("invariant violated: contraction scale must be positive")
        if m.kind == "sliding":
            if m.axis not in (0, 1, 2):
                raise PhantomSpecError("sliding plane axis must be 0, 1 or 2")
            if m.translation_a[m.axis] != 0 or m.translation_b[m.axis] != 0:
                raise PhantomSpecError("invariant violated: sliding translations must be tangential to the plane")
        c = np.asarray(g.lv_center, dtype=float)
        hi = np.asarray(self.grid.extents, dtype=float) - 1
        for name, center, radius in (("LV", c, g.lvm_radius), ("RV", c + np.asarray(g.rv_offset), g.rv_radius)):
            if np.any(center - radius < 0) or np.any(center + radius > hi):
                raise PhantomSpecError(f"invariant violated: {name} sphere does not fit inside the grid")

    def to_dict(self) -> dict:
        return {
            "extents": list(self.grid.extents),
            "spacing": list(self.grid.spacing),
            "geometry": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.geometry).items()},
            "motion": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.motion).items()},
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        try:
            grid = Grid(tuple(doc["extents"]), tuple(doc.get("spacing", (1.0, 1.0, 1.0))))
        except KeyError:
            raise PhantomSpecError("phantom spec needs 'extents'") from None
        except (TypeError, ValueError) as exc:
            raise PhantomSpecError(f"invalid grid: {exc}") from None
        geometry = None
        if "geometry" in doc:
            gdoc = dict(doc["geometry"])
            if "lvm_outer_radius" in gdoc:
                outer = gdoc.pop("lvm_outer_radius")
                gdoc["lvm_thickness"] = outer - gdoc.get("lvbp_radius", Geometry.lvbp_radius)
            base = Geometry.default(grid)
            try:
                geometry = Geometry(**{**asdict(base), **_tuples(gdoc)})
            except TypeError as exc:
                raise PhantomSpecError(f"invalid geometry: {exc}") from None
        try:
            motion = Motion(**_tuples(doc.get("motion", {})))
        except TypeError as exc:
            raise PhantomSpecError(f"invalid motion: {exc}") from None
        return cls(
            grid=grid,
            geometry=geometry,
            motion=motion,
            noise_sigma=float(doc.get("noise_sigma", 0.02)),
            seed=int(doc.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PhantomSpecError(f"phantom spec is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise PhantomSpecError("phantom spec must be a JSON object")
        return cls.from_dict(doc)


def _tuples(d: dict) -> dict:
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}


@dataclass
class PhantomPair:
    moving: Volume
    fixed: Volume
    moving_mask: LabelMap
    fixed_mask: LabelMap
    gt_deformation: VectorField
    spec: PhantomSpec


def max_motion(spec: PhantomSpec) -> float:
    m, g = spec.motion, spec.geometry
    if m.kind == "rigid_shift":
        return float(np.linalg.norm(m.shift))
    if m.kind == "contraction":
        return abs(g.lvbp_radius * (1.0 - m.scale))
    if m.kind == "sliding":
        return float(max(np.linalg.norm(m.translation_a), np.linalg.norm(m.translation_b)))
    return 0.0


def label_function(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Moving-frame labels at continuous points ``pts`` of shape (3, ...)."""
    g, m = spec.geometry, spec.motion
    c = np.asarray(g.lv_center, dtype=float).reshape(3, *([1] * (pts.ndim - 1)))
    rc = c + np.asarray(g.rv_offset, dtype=float).reshape(c.shape)
    d_lv = np.sqrt(((pts - c) ** 2).sum(axis=0))
    d_rv = np.sqrt(((pts - rc) ** 2).sum(axis=0))
    lab = np.full(pts.shape[1:], BACKGROUND, dtype=np.int64)
    rv = (d_rv <= g.rv_radius) & (d_lv > g.lvm_radius)
    lv_ok = True
    if m.kind == "sliding":
        # LV on side a; on side b the RV sphere reaches down to the plane, so
        # the two ventricles slide against each other across it
        side_a = pts[m.axis] < m.offset
        lv_ok = side_a
        rv = (d_rv <= g.rv_radius) & ~side_a
    lab[rv] = RV
    lab[(d_lv <= g.lvm_radius) & lv_ok] = LVM
    lab[(d_lv <= g.lvbp_radius) & lv_ok] = LVBP
    return lab


def ground_truth(spec: PhantomSpec) -> VectorField:
    """phi mapping fixed-grid points to moving-image coordinates."""
    grid = spec.grid
    x = grid.identity()
    m, g = spec.motion, spec.geometry
    if m.kind == "rigid_shift":
        phi = x + np.asarray(m.shift, dtype=float).reshape(3, 1, 1, 1)
    elif m.kind == "sliding":
        side_a = x[m.axis] < m.offset
        ta = np.asarray(m.translation_a, dtype=float).reshape(3, 1, 1, 1)
        tb = np.asarray(m.translation_b, dtype=float).reshape(3, 1, 1, 1)
        phi = x + np.where(side_a[None], ta, tb)
    else:
        # radial map: blood pool scales by `scale`, everything outside keeps its
        # shell volume (rho^3 - r^3 constant), so the myocardium is incompressible
        c = np.asarray(g.lv_center, dtype=float).reshape(3, 1, 1, 1)
        rel = x - c
        r = np.sqrt((rel**2).sum(axis=0))
        r_bp_fixed = m.scale * g.lvbp_radius
        shell = g.lvbp_radius**3 - r_bp_fixed**3
        rho = np.where(r <= r_bp_fixed, r / m.scale, np.cbrt(np.maximum(r**3 + shell, 0.0)))
        ratio = np.divide(rho, r, out=np.full_like(r, 1.0 / m.scale), where=r > 0)
        phi = c + rel * ratio
    return VectorField(grid, phi, "deformation")


def intensity_image(labels: np.ndarray) -> np.ndarray:
    lut = np.array([INTENSITY[k] for k in (BACKGROUND, LVBP, LVM, RV)])
    return lut[labels]


def generate_phantom(spec: PhantomSpec) -> PhantomPair:
    grid = spec.grid
    rng = np.random.default_rng(spec.seed)
    gt = ground_truth(spec)
    moving_labels = label_function(spec, grid.identity())
    fixed_labels = label_function(spec, gt.array)
    clean = Volume(grid, intensity_image(moving_labels))
    fixed_clean = warp_volume(clean, gt).array
    moving = clean.array + spec.noise_sigma * rng.standard_normal(grid.extents)
    fixed = fixed_clean + spec.noise_sigma * rng.standard_normal(grid.extents)
    return PhantomPair(
        moving=Volume(grid, moving),
        fixed=Volume(grid, fixed),
        moving_mask=LabelMap(grid, moving_labels),
        fixed_mask=LabelMap(grid, fixed_labels),
        gt_deformation=gt,
        spec=spec,
    )


def shift_phantom(extents=(32, 32, 32), shift=(2.0, 0.0, 0.0), seed: int = 0, noise_sigma: float = 0.02) -> PhantomPair:
    spec = PhantomSpec(Grid(extents), motion=Motion("rigid_shift", shift=tuple(shift)), noise_sigma=noise_sigma, seed=seed)
    return generate_phantom(spec)


def sliding_phantom(extents=(32, 32, 32), shift: float = 3.0, seed: int = 0, noise_sigma: float = 0.02) -> PhantomPair:
    """LV below the plane, an RV cap (radius 6) sitting on the LV's cut face, opposite shifts along x."""
    grid = Grid(extents)
    base = Geometry.default(grid)
    s = min(extents) / 32.0
    geometry = Geometry(base.lv_center, base.lvbp_radius, base.lvm_thickness, (0.0, 2.0 * s, 0.0), 6.0 * s)
    motion = Motion("sliding", axis=1, translation_a=(shift, 0.0, 0.0), translation_b=(-shift, 0.0, 0.0))
    spec = PhantomSpec(grid, geometry=geometry, motion=motion, noise_sigma=noise_sigma, seed=seed)
    return generate_phantom(spec)


def contraction_phantom(extents=(32, 32, 32), scale: float = 0.8, seed: int = 0, noise_sigma: float = 0.02) -> PhantomPair:
    spec = PhantomSpec(Grid(extents), motion=Motion("contraction", scale=scale), noise_sigma=noise_sigma, seed=seed)
    return generate_phantom(spec)
