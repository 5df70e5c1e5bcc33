"""Synthetic multi-view cine studies with closed-form ground truth.

Geometry
--------
The left-ventricular blood pool is the apical half of an ellipsoid whose
equator lies on the mitral base plane. Its radial semi-axes shrink from
end-diastole (ED) to end-systole (ES) by ``contraction``; its long axis
shortens because the base plane descends towards a fixed apex. The
epicardium keeps its ED radial extent, so the wall thickens in systole and
the mitral annulus moves purely along the long axis. The right ventricle is
a second half-ellipsoid, offset laterally and clipped by the LV epicardium.

All physical coordinates are millimetres measured from the low edge of the
image grid, so pixel ``i`` has its centre at ``(i + 0.5) * spacing``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

BG, RV, MYO, LV = 0, 1, 2, 3
LABELS = (BG, RV, MYO, LV)
INTENSITY = {BG: 0.1, RV: 0.9, MYO: 0.5, LV: 0.9}

LAX_VIEWS = ("lax_2c", "lax_3c", "lax_4c")
VIEWS = ("sax",) + LAX_VIEWS
# Angle of each long-axis plane about the LV long axis, in degrees.
LAX_ANGLES = {"lax_2c": 0.0, "lax_3c": 60.0, "lax_4c": 120.0}

# RV semi-axes relative to the LV epicardium.
RV_RADIAL_SCALE = (0.8, 1.3)
RV_LENGTH_SCALE = 0.8


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomParams:
    lv_semi_axes_ed: tuple[float, float, float] = (30.0, 30.0, 50.0)
    contraction: float = 0.8
    wall_thickness: float = 6.0
    rv_offset: float = 36.0
    base_plane_z_ed: float = 70.0
    base_plane_z_es: float = 60.0
    n_phases: int = 20
    noise_sigma: float = 0.05
    seed: int = 0
    sax_shape: tuple[int, int, int] = (96, 96, 48)
    sax_spacing: tuple[float, float, float] = (1.5, 1.5, 2.0)
    lax_shape: tuple[int, int] = (96, 96)
    lax_spacing: tuple[float, float] = (1.5, 1.5)
    center_offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.contraction < 1.0:
            raise PhantomError(f"contraction must lie in (0, 1), got {self.contraction}")
        if self.wall_thickness <= 0:
            raise PhantomError("wall_thickness must be positive")
        if self.n_phases < 2:
            raise PhantomError("n_phases must be at least 2")
        if min(self.lv_semi_axes_ed) <= 0:
            raise PhantomError("LV semi-axes must be positive")
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be non-negative")
        for name in ("sax_spacing", "lax_spacing"):
            if min(getattr(self, name)) <= 0:
                raise PhantomError(f"{name} must be strictly positive, got {getattr(self, name)}")
        for name in ("sax_shape", "lax_shape"):
            if min(getattr(self, name)) < 1:
                raise PhantomError(f"{name} must be positive, got {getattr(self, name)}")
        if self.length_at(self.base_plane_z_es) <= 0:
            raise PhantomError("base plane at ES lies below the apex")

    @property
    def apex_z(self) -> float:
        """Endocardial apex height, fixed over the cycle."""
        return self.base_plane_z_ed - self.lv_semi_axes_ed[2]

    def length_at(self, base_z: float) -> float:
        return base_z - (self.base_plane_z_ed - self.lv_semi_axes_ed[2])

    @property
    def es_phase(self) -> int:
        return self.n_phases // 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PhantomError(f"unknown phantom parameter(s): {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class CineStudy:
    sax: np.ndarray  # [X, Y, Z, T]
    lax_2c: np.ndarray  # [X, Y, T]
    lax_3c: np.ndarray
    lax_4c: np.ndarray
    spacing_sax: tuple[float, float, float]
    spacing_lax: tuple[float, float]
    gt_masks: dict[str, np.ndarray] | None = None
    gt_landmarks: dict[str, np.ndarray] | None = None  # view -> [T, 3, 2] mm
    gt_scalars: dict[str, float] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def images(self) -> dict[str, np.ndarray]:
        return {v: getattr(self, v) for v in VIEWS}

    @property
    def n_phases(self) -> int:
        return self.sax.shape[-1]

    def spacing(self, view: str) -> tuple[float, ...]:
        return self.spacing_sax if view == "sax" else self.spacing_lax

    def validate(self) -> None:
        for view, img in self.images.items():
            if not np.all(np.isfinite(img)):
                raise PhantomError(f"non-finite intensities in {view}")
        if min(self.spacing_sax) <= 0 or min(self.spacing_lax) <= 0:
            raise PhantomError("spacing must be strictly positive")
        for view, m in (self.gt_masks or {}).items():
            if not np.isin(m, LABELS).all():
                raise PhantomError(f"mask for {view} has labels outside {{0,1,2,3}}")


def cycle_profile(t, n_phases: int):
    """Contraction state in [0, 1]: 0 at ED (t=0), 1 at ES (t=n/2)."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.asarray(t, dtype=float) / n_phases))


@dataclass(frozen=True)
class _PhaseGeometry:
    center: tuple[float, float]
    a: float
    b: float
    c: float
    base: float
    epi_a: float
    epi_b: float
    wall: float
    rv_center_x: float
    rv_a: float
    rv_b: float
    rv_c: float


def _phase_geometry(params: PhantomParams, s: float) -> _PhaseGeometry:
    a0, b0, _ = params.lv_semi_axes_ed
    radial = 1.0 - s * (1.0 - params.contraction)
    base = params.base_plane_z_ed + s * (params.base_plane_z_es - params.base_plane_z_ed)
    c = params.length_at(base)
    nx, ny, _ = params.sax_shape
    sx, sy, _ = params.sax_spacing
    center = (nx * sx / 2 + params.center_offset[0], ny * sy / 2 + params.center_offset[1])
    w = params.wall_thickness
    return _PhaseGeometry(
        center=center,
        a=a0 * radial,
        b=b0 * radial,
        c=c,
        base=base,
        epi_a=a0 + w,
        epi_b=b0 + w,
        wall=w,
        rv_center_x=center[0] + params.rv_offset,
        rv_a=RV_RADIAL_SCALE[0] * (a0 + w) * radial,
        rv_b=RV_RADIAL_SCALE[1] * (b0 + w) * radial,
        rv_c=RV_LENGTH_SCALE * c,
    )


def _label_points(g: _PhaseGeometry, x, y, z) -> np.ndarray:
    """Label for physical points (broadcastable arrays, mm)."""
    dx = x - g.center[0]
    dy = y - g.center[1]
    dz = z - g.base
    below = dz <= 0
    inner = (dx / g.a) ** 2 + (dy / g.b) ** 2 + (dz / g.c) ** 2 <= 1.0
    outer = (dx / g.epi_a) ** 2 + (dy / g.epi_b) ** 2 + (dz / (g.c + g.wall)) ** 2 <= 1.0
    rv = ((x - g.rv_center_x) / g.rv_a) ** 2 + (dy / g.rv_b) ** 2 + (dz / g.rv_c) ** 2 <= 1.0
    lab = np.zeros(np.broadcast(x, y, z).shape, dtype=np.uint8)
    lab[below & rv & ~outer] = RV
    lab[below & outer] = MYO
    lab[below & inner] = LV
    return lab


def _centres(n: int, spacing: float) -> np.ndarray:
    return (np.arange(n) + 0.5) * spacing


def _lax_frame(params: PhantomParams, view: str):
    """Physical (x, y, z) of every LAX pixel centre, plus the plane direction."""
    nu, nv = params.lax_shape
    su, sv = params.lax_spacing
    theta = math.radians(LAX_ANGLES[view])
    u = _centres(nu, su) - nu * su / 2
    zc = params.sax_shape[2] * params.sax_spacing[2] / 2
    z = _centres(nv, sv) - nv * sv / 2 + zc
    return u, z, (math.cos(theta), math.sin(theta))


def _lax_landmarks(params: PhantomParams, g: _PhaseGeometry, view: str) -> np.ndarray:
    nu, nv = params.lax_shape
    su, sv = params.lax_spacing
    _, _, (ct, st) = _lax_frame(params, view)
    radius = 1.0 / math.sqrt((ct / g.epi_a) ** 2 + (st / g.epi_b) ** 2)
    zc = params.sax_shape[2] * params.sax_spacing[2] / 2
    u0 = nu * su / 2
    v0 = nv * sv / 2 - zc
    apex_z = g.base - g.c - g.wall
    return np.array(
        [
            [u0 - radius, g.base + v0],
            [u0 + radius, g.base + v0],
            [u0, apex_z + v0],
        ]
    )


def _check_grid(params: PhantomParams) -> None:
    """Reject grids that cannot hold the heart at any phase."""
    g = _phase_geometry(params, 0.0)
    nx, ny, nz = params.sax_shape
    sx, sy, sz = params.sax_spacing
    x_lo = g.center[0] - g.epi_a
    x_hi = max(g.center[0] + g.epi_a, g.rv_center_x + g.rv_a)
    y_half = max(g.epi_b, g.rv_b)
    z_lo = params.apex_z - g.wall
    z_hi = max(params.base_plane_z_ed, params.base_plane_z_es)
    need = (
        math.ceil(2 * max(x_hi - nx * sx / 2, nx * sx / 2 - x_lo) / sx),
        math.ceil(2 * (y_half + abs(params.center_offset[1])) / sy),
        max(math.ceil(z_hi / sz), 1),
    )
    if x_lo < 0 or x_hi > nx * sx or g.center[1] - y_half < 0 or g.center[1] + y_half > ny * sy or z_lo < 0 or z_hi > nz * sz:
        raise PhantomError(
            f"SAX grid {params.sax_shape} too small to contain the heart; "
            f"requires at least {need} voxels at spacing {params.sax_spacing}"
        )
    nu, nv = params.lax_shape
    su, sv = params.lax_spacing
    half_u = max(g.epi_a, g.epi_b, abs(g.rv_center_x - g.center[0]) + g.rv_a) + math.hypot(*params.center_offset)
    zc = nz * sz / 2
    half_v = max(abs(z_lo - zc), abs(z_hi - zc))
    if 2 * half_u > nu * su or 2 * half_v > nv * sv:
        raise PhantomError(
            f"LAX grid {params.lax_shape} too small to contain the heart; requires at least "
            f"({math.ceil(2 * half_u / su)}, {math.ceil(2 * half_v / sv)}) pixels at spacing {params.lax_spacing}"
        )


def analytic_ground_truth(params: PhantomParams) -> dict[str, float]:
    """Closed-form volumes, EF, MAPSE, LV lengths and GLS (no rasterization)."""
    t_es = params.es_phase
    g_ed = _phase_geometry(params, 0.0)
    g_es = _phase_geometry(params, float(cycle_profile(t_es, params.n_phases)))
    edv = 2.0 / 3.0 * math.pi * g_ed.a * g_ed.b * g_ed.c / 1000.0
    esv = 2.0 / 3.0 * math.pi * g_es.a * g_es.b * g_es.c / 1000.0
    len_ed = g_ed.c + g_ed.wall
    len_es = g_es.c + g_es.wall
    return {
        "edv_ml": edv,
        "esv_ml": esv,
        "ef": (edv - esv) / edv * 100.0,
        "mapse_mm": abs(g_ed.base - g_es.base),
        "lv_length_ed_mm": len_ed,
        "lv_length_es_mm": len_es,
        "gls": (len_ed - len_es) / len_ed * 100.0,
        "ed_phase": 0,
        "es_phase": t_es,
    }


def generate_study(params: PhantomParams) -> CineStudy:
    """Rasterize masks, landmarks and noisy images for every phase."""
    _check_grid(params)
    T = params.n_phases
    nx, ny, nz = params.sax_shape
    sx, sy, sz = params.sax_spacing
    xs, ys, zs = np.meshgrid(_centres(nx, sx), _centres(ny, sy), _centres(nz, sz), indexing="ij")
    lax_grids = {}
    for view in LAX_VIEWS:
        u, z, (ct, st) = _lax_frame(params, view)
        uu, zz = np.meshgrid(u, z, indexing="ij")
        lax_grids[view] = (uu, zz, ct, st)

    masks = {"sax": np.zeros((nx, ny, nz, T), np.uint8)}
    masks.update({v: np.zeros(params.lax_shape + (T,), np.uint8) for v in LAX_VIEWS})
    landmarks = {v: np.zeros((T, 3, 2)) for v in LAX_VIEWS}
    for t in range(T):
        g = _phase_geometry(params, float(cycle_profile(t, T)))
        masks["sax"][..., t] = _label_points(g, xs, ys, zs)
        for view, (uu, zz, ct, st) in lax_grids.items():
            masks[view][..., t] = _label_points(g, g.center[0] + uu * ct, g.center[1] + uu * st, zz)
            landmarks[view][t] = _lax_landmarks(params, g, view)

    lut = np.array([INTENSITY[k] for k in LABELS], dtype=np.float32)
    streams = np.random.SeedSequence(params.seed).spawn(len(VIEWS))
    images = {}
    for view, ss in zip(VIEWS, streams):
        img = lut[masks[view]]
        if params.noise_sigma > 0:
            rng = np.random.default_rng(ss)
            img = img + rng.normal(0.0, params.noise_sigma, img.shape).astype(np.float32)
        images[view] = img.astype(np.float32)

    gt = analytic_ground_truth(params)
    study = CineStudy(
        **images,
        spacing_sax=tuple(float(s) for s in params.sax_spacing),
        spacing_lax=tuple(float(s) for s in params.lax_spacing),
        gt_masks=masks,
        gt_landmarks=landmarks,
        gt_scalars=gt,
        meta={
            "center_vox": [
                (params.sax_shape[0] * sx / 2 + params.center_offset[0]) / sx - 0.5,
                (params.sax_shape[1] * sy / 2 + params.center_offset[1]) / sy - 0.5,
                (nz - 1) / 2,
            ],
            "ed_phase": 0,
            "es_phase": params.es_phase,
            "params": params.to_dict(),
        },
    )
    study.validate()
    return study


def desk_params(**overrides) -> PhantomParams:
    """Small-grid geometry matching the desk model (SAX 64x64x4, LAX 64x64)."""
    base = dict(
        lv_semi_axes_ed=(18.0, 18.0, 30.0),
        contraction=0.75,
        wall_thickness=6.0,
        rv_offset=22.0,
        base_plane_z_ed=38.0,
        base_plane_z_es=31.0,
        n_phases=10,
        noise_sigma=0.03,
        seed=0,
        sax_shape=(64, 64, 4),
        sax_spacing=(2.0, 2.0, 10.0),
        lax_shape=(64, 64),
        lax_spacing=(2.0, 2.0),
    )
    base.update(overrides)
    return PhantomParams(**base)


def sample_cohort(n: int, seed: int, template: PhantomParams | None = None) -> list[PhantomParams]:
    """Draw ``n`` anatomically varied parameter sets around ``template``.

    Each subject gets its own noise seed derived from ``seed``. A subject is
    labelled diseased (see :func:`cohort_labels`) when its EF falls below 45%.
    """
    template = template or desk_params()
    rng = np.random.default_rng(seed)
    a0, b0, c0 = template.lv_semi_axes_ed
    out = []
    for i in range(n):
        scale = rng.uniform(0.85, 1.15)
        a = a0 * scale * rng.uniform(0.95, 1.05)
        b = b0 * scale * rng.uniform(0.95, 1.05)
        c = c0 * rng.uniform(0.9, 1.05)
        contraction = rng.uniform(0.6, 0.92)
        descent = c * rng.uniform(0.05, 0.25)
        wall = template.wall_thickness * rng.uniform(0.85, 1.15)
        base_ed = template.base_plane_z_ed + rng.uniform(-1.5, 0.0)
        off = tuple(float(v) for v in rng.uniform(-4.0, 4.0, size=2))
        out.append(
            dataclasses.replace(
                template,
                lv_semi_axes_ed=(float(a), float(b), float(min(c, base_ed - wall - 0.5))),
                contraction=float(contraction),
                wall_thickness=float(wall),
                rv_offset=float(template.rv_offset * scale),
                base_plane_z_ed=float(base_ed),
                base_plane_z_es=float(base_ed - descent),
                center_offset=off,
                seed=int(seed * 100003 + i),
            )
        )
    return out


def cohort_labels(params: PhantomParams) -> dict[str, float]:
    gt = analytic_ground_truth(params)
    return {"ef": gt["ef"], "disease": float(gt["ef"] < 45.0)}
