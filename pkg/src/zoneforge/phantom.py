"""Synthetic three-zone prostate phantoms with all six input maps.

The gland is an axis-aligned ellipsoid; the central zone is a concentric
ellipsoid scaled by ``cz_fraction``; the peripheral zone is the posterior
part (``y`` above the centre) of the gland outside the central zone. The
remaining anterior shell is fibromuscular stroma: inside the gland, in no
zone mask.

MRE defaults (SWS, mag, phi) for the central and peripheral zones are the
ground-truth zonal statistics reported for the patient cohort. Everything
else (background, stroma, T2w, ADC, DWI baselines) is synthetic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import CaseRecord, MapKind, MaskSet, VolumeGrid
from .errors import ConfigError, InvariantError
from .rng import as_rng

logger = logging.getLogger(__name__)

__all__ = [
    "ZoneStat",
    "ZoneIntensityModel",
    "DwiProtocol",
    "PhantomConfig",
    "generate_case",
    "generate_cases",
    "synth_dwi",
    "adc_fit",
]

TISSUES = ("background", "stroma", "cz", "pz")
_LABEL = {name: i for i, name in enumerate(TISSUES)}

STANDARD_B_VALUES = (0.0, 50.0, 500.0, 1000.0, 1400.0)


@dataclass(frozen=True)
class ZoneStat:
    mean: float
    sd: float


def _stats(**kw):
    return {k: ZoneStat(*v) for k, v in kw.items()}


def _default_intensities():
    return {
        # cz/pz: cohort ground-truth values; background/stroma synthetic
        MapKind.SWS: _stats(background=(1.05, 0.30), stroma=(1.55, 0.30), cz=(1.25, 0.32), pz=(1.39, 0.22)),
        MapKind.MAG: _stats(background=(12.0, 5.0), stroma=(21.0, 6.0), cz=(29.6, 7.85), pz=(43.21, 7.2)),
        MapKind.PHI: _stats(background=(0.75, 0.18), stroma=(0.50, 0.12), cz=(0.64, 0.17), pz=(0.58, 0.09)),
        # synthetic, arbitrary units
        MapKind.T2W: _stats(background=(60.0, 20.0), stroma=(80.0, 20.0), cz=(110.0, 30.0), pz=(180.0, 25.0)),
        # true diffusivity in mm^2/s before DWI synthesis
        MapKind.ADC: _stats(
            background=(1.0e-3, 0.25e-3), stroma=(0.9e-3, 0.2e-3), cz=(1.2e-3, 0.25e-3), pz=(1.6e-3, 0.25e-3)
        ),
    }


@dataclass
class ZoneIntensityModel:
    """Gaussian intensity statistics per map kind and tissue class."""

    stats: dict = field(default_factory=_default_intensities)

    def __post_init__(self):
        stats = {}
        for kind, per_zone in self.stats.items():
            kind = MapKind.parse(kind)
            zones = {}
            for zone, st in per_zone.items():
                if zone not in TISSUES:
                    raise ConfigError(f"unknown tissue class {zone!r}")
                st = st if isinstance(st, ZoneStat) else ZoneStat(*st)
                if st.sd < 0:
                    raise ConfigError(f"{kind.value}/{zone}: sd must be >= 0")
                if kind in (MapKind.SWS, MapKind.ADC, MapKind.MAG) and not st.mean > 0:
                    raise ConfigError(f"{kind.value}/{zone}: mean must be > 0")
                if kind is MapKind.PHI and not 0 < st.mean < math.pi / 2:
                    raise ConfigError(f"phi/{zone}: mean must lie in (0, pi/2)")
                zones[zone] = st
            missing = set(TISSUES) - zones.keys()
            if missing:
                raise ConfigError(f"{kind.value}: missing tissue classes {sorted(missing)}")
            stats[kind] = zones
        self.stats = stats

    def mean(self, kind, zone):
        return self.stats[MapKind.parse(kind)][zone].mean

    def to_dict(self):
        return {k.value: {z: [s.mean, s.sd] for z, s in v.items()} for k, v in self.stats.items()}


@dataclass
class DwiProtocol:
    """b-values in s/mm^2 and the b=0 baseline signal per tissue class."""

    b: tuple = STANDARD_B_VALUES
    s0: dict = field(default_factory=lambda: {"background": 600.0, "stroma": 700.0, "cz": 900.0, "pz": 1000.0})
    noise_sd: float = 8.0

    def __post_init__(self):
        self.b = tuple(float(v) for v in self.b)
        if len(self.b) < 2:
            raise ConfigError("a DWI protocol needs at least two b-values")
        if self.b[0] != 0.0:
            raise ConfigError("the first b-value must be 0")
        if any(b1 <= b0 for b0, b1 in zip(self.b, self.b[1:])):
            raise ConfigError("b-values must be strictly increasing")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")

    @property
    def b_image(self):
        """b-value of the image exported as DWI_b (1400 if acquired)."""
        return 1400.0 if 1400.0 in self.b else self.b[-1]


@dataclass
class PhantomConfig:
    """Geometry, texture and noise settings of the phantom generator.

    ``noise_scale`` multiplies every tissue SD and the DWI noise; 0 gives
    noiseless maps. ``blur_sigma`` (voxels) is the correlation length of the
    texture noise; tissue means stay piecewise constant.
    """

    dims: tuple = (64, 64, 9)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    pg_semi_axes_mm: tuple = (20.0, 14.0, 3.8)
    center_jitter_mm: tuple = (3.0, 3.0, 0.0)
    axis_jitter: float = 0.1
    cz_fraction: float = 0.65
    pz_thickness_mm: float | None = None
    blur_sigma: float = 1.0
    noise_scale: float = 1.0
    intensities: ZoneIntensityModel = field(default_factory=ZoneIntensityModel)
    dwi: DwiProtocol = field(default_factory=DwiProtocol)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.intensities, dict):
            self.intensities = ZoneIntensityModel(self.intensities)
        if isinstance(self.dwi, dict):
            self.dwi = DwiProtocol(**self.dwi)
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.pg_semi_axes_mm = tuple(float(a) for a in self.pg_semi_axes_mm)
        self.center_jitter_mm = tuple(float(a) for a in self.center_jitter_mm)
        self.validate()

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ConfigError(f"spacing_mm must be positive, got {self.spacing_mm}")
        if min(self.pg_semi_axes_mm) <= 0 or min(self.center_jitter_mm) < 0:
            raise ConfigError("semi-axes must be positive and jitter non-negative")
        if not 0 <= self.axis_jitter < 1:
            raise ConfigError("axis_jitter must lie in [0, 1)")
        if not 0 < self.cz_fraction < 1:
            raise ConfigError("cz_fraction must lie in (0, 1)")
        if self.blur_sigma < 0 or self.noise_scale < 0:
            raise ConfigError("blur_sigma and noise_scale must be >= 0")
        for axis, (n, s, a, j) in enumerate(
            zip(self.dims, self.spacing_mm, self.pg_semi_axes_mm, self.center_jitter_mm)
        ):
            half = n * s / 2.0
            reach = a * (1 + self.axis_jitter) + j
            if reach > half:
                raise ConfigError(
                    f"gland ellipsoid exceeds the grid along axis {'xyz'[axis]}: "
                    f"needs {reach:.2f} mm from centre, grid offers {half:.2f} mm"
                )
        for kind in (MapKind.SWS, MapKind.MAG, MapKind.PHI, MapKind.T2W, MapKind.ADC):
            if kind not in self.intensities.stats:
                raise ConfigError(f"intensity model lacks {kind.value}")

    @classmethod
    def full_scale(cls, **kw):
        """128x128x25 grid at 2 mm, the MRE acquisition geometry."""
        base = dict(
            dims=(128, 128, 25),
            spacing_mm=(2.0, 2.0, 2.0),
            pg_semi_axes_mm=(22.0, 16.0, 18.0),
            center_jitter_mm=(4.0, 4.0, 2.0),
        )
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["intensities"] = self.intensities.to_dict()
        d["dwi"] = {"b": list(self.dwi.b), "s0": dict(self.dwi.s0), "noise_sd": self.dwi.noise_sd}
        for key in ("dims", "spacing_mm", "pg_semi_axes_mm", "center_jitter_mm"):
            d[key] = list(d[key])
        return d


def _geometry(cfg, rng):
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing_mm
    jitter = rng.uniform(-1.0, 1.0, 3) * np.asarray(cfg.center_jitter_mm)
    scale = 1.0 + cfg.axis_jitter * rng.uniform(-1.0, 1.0, 3)
    center = np.array([nx * sx, ny * sy, nz * sz]) / 2.0 + jitter
    semi = np.asarray(cfg.pg_semi_axes_mm) * scale
    z, y, x = np.meshgrid(
        (np.arange(nz) + 0.5) * sz,
        (np.arange(ny) + 0.5) * sy,
        (np.arange(nx) + 0.5) * sx,
        indexing="ij",
    )
    dx, dy, dz = x - center[0], y - center[1], z - center[2]

    def inside(axes):
        return (dx / axes[0]) ** 2 + (dy / axes[1]) ** 2 + (dz / axes[2]) ** 2 <= 1.0

    pg = inside(semi)
    cz = inside(semi * cfg.cz_fraction)
    pz = pg & ~cz & (dy > 0)
    if cfg.pz_thickness_mm is not None:
        inner = np.maximum(semi - cfg.pz_thickness_mm, 1e-9)
        pz &= ~inside(inner)
    labels = np.zeros(pg.shape, dtype=np.int8)
    labels[pg] = _LABEL["stroma"]
    labels[cz] = _LABEL["cz"]
    labels[pz] = _LABEL["pz"]
    return labels, MaskSet(pg, cz, pz, cfg.spacing_mm), {"center_mm": center.tolist(), "semi_axes_mm": semi.tolist()}


def _lookup(labels, table):
    return np.asarray(table, dtype=np.float64)[labels]


def _noise_gain(sigma, truncate=4.0):
    # std of unit white noise after a separable 3D Gaussian filter
    r = int(truncate * sigma + 0.5)
    w = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    w /= w.sum()
    return float(np.sqrt(np.sum(w**2))) ** 3


def _textured(labels, stats, cfg, rng):
    # Sharp tissue means plus smooth unit-variance texture: blurring the
    # noise rather than the means keeps every zone mean unbiased.
    means = _lookup(labels, [stats[t].mean for t in TISSUES])
    sds = _lookup(labels, [stats[t].sd for t in TISSUES])
    noise = rng.normal(labels.shape)
    if cfg.blur_sigma > 0:
        noise = gaussian_filter(noise, cfg.blur_sigma, mode="wrap") / _noise_gain(cfg.blur_sigma)
    return means + cfg.noise_scale * sds * noise


def generate_case(cfg, rng=None, case_id="case000", split_tag="train"):
    """Generate one co-registered six-map case with ground-truth masks.

    The result depends only on ``cfg`` and the state of ``rng`` (an
    :class:`~zoneforge.rng.RngState`, a seed, or ``None`` for ``cfg.seed``).
    """
    cfg.validate()
    rng = as_rng(cfg.seed if rng is None else rng)
    labels, truth, geom = _geometry(cfg, rng)
    model = cfg.intensities.stats
    maps = {}
    for kind in (MapKind.T2W, MapKind.MAG, MapKind.SWS, MapKind.PHI):
        values = _textured(labels, model[kind], cfg, rng)
        hi = math.pi / 2 if kind is MapKind.PHI else np.inf
        maps[kind] = VolumeGrid(kind, np.clip(values, 0.0, hi).astype(np.float32), cfg.spacing_mm)

    adc_true = np.clip(_textured(labels, model[MapKind.ADC], cfg, rng), 0.0, None)
    s0 = _lookup(labels, [cfg.dwi.s0[t] for t in TISSUES])
    signals = synth_dwi(VolumeGrid(MapKind.ADC, adc_true, cfg.spacing_mm), cfg.dwi, s0=s0)
    noisy = []
    for sig in signals:
        values = sig.values + cfg.noise_scale * cfg.dwi.noise_sd * rng.normal(labels.shape)
        noisy.append(sig.replace(values=np.maximum(values, 1.0)))
    adc = adc_fit(noisy, cfg.dwi)
    b_index = cfg.dwi.b.index(cfg.dwi.b_image)
    maps[MapKind.DWI_B] = noisy[b_index].replace(values=noisy[b_index].values.astype(np.float32))
    maps[MapKind.ADC] = adc.replace(values=adc.values.astype(np.float32))

    meta = {"generator": "phantom", "seed": rng.seed, **geom}
    return CaseRecord(case_id=case_id, maps=maps, truth=truth, split_tag=split_tag, meta=meta)


def generate_cases(cfg, count, seed=None, prefix="case"):
    """Generate ``count`` cases with independent seed-split streams."""
    root = as_rng(cfg.seed if seed is None else seed)
    width = max(3, len(str(count - 1)))
    return [
        generate_case(cfg, child, case_id=f"{prefix}{i:0{width}d}")
        for i, child in enumerate(root.spawn(count))
    ]


def synth_dwi(adc_map, proto, s0=None):
    """Monoexponential DWI signals ``S(b) = S0 * exp(-b * ADC)``, one per b.

    Parameters
    ----------
    adc_map : VolumeGrid or ndarray
        Diffusivity in mm^2/s.
    proto : DwiProtocol
    s0 : float or ndarray, optional
        Baseline signal; defaults to the protocol's central-zone baseline.
    """
    if isinstance(adc_map, VolumeGrid):
        adc, spacing = np.asarray(adc_map.values, dtype=np.float64), adc_map.spacing_mm
    else:
        adc, spacing = np.asarray(adc_map, dtype=np.float64), (1.0, 1.0, 1.0)
    if np.any(adc < 0):
        raise InvariantError(f"ADC map has {int(np.count_nonzero(adc < 0))} negative voxels")
    s0 = proto.s0["cz"] if s0 is None else s0
    s0 = np.broadcast_to(np.asarray(s0, dtype=np.float64), adc.shape)
    return [VolumeGrid(MapKind.DWI_B, s0 * np.exp(-b * adc), spacing) for b in proto.b]


def adc_fit(signals, proto, return_flagged=False):
    """Per-voxel least-squares ADC from multi-b signals.

    The slope of ``ln S`` against ``b`` is negated and clamped at 0. Voxels
    with any non-positive signal cannot be log-fitted; they are set to 0 and
    counted (logged, and returned as a mask when ``return_flagged``).
    """
    if len(signals) != len(proto.b):
        raise InvariantError(f"{len(signals)} signal volumes for {len(proto.b)} b-values")
    if len(signals) < 2:
        raise InvariantError("ADC fitting needs at least two b-values")
    stack = np.stack([np.asarray(s.values, dtype=np.float64) for s in signals])
    flagged = np.any(stack <= 0, axis=0)
    logs = np.log(np.where(stack > 0, stack, 1.0))
    b = np.asarray(proto.b, dtype=np.float64)
    bc = b - b.mean()
    # centre on the b=0 sample so constant signals give an exact zero slope
    yc = logs - logs[0]
    slope = np.tensordot(bc, yc, axes=(0, 0)) / np.dot(bc, bc)
    adc = np.maximum(-slope, 0.0)
    adc[flagged] = 0.0
    n_flagged = int(np.count_nonzero(flagged))
    if n_flagged:
        logger.warning("adc_fit: %d voxels with non-positive signal set to 0", n_flagged)
    vol = VolumeGrid(MapKind.ADC, adc, signals[0].spacing_mm)
    if return_flagged:
        return vol, flagged
    return vol
