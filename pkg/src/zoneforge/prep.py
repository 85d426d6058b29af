"""Resampling, centre cropping and elastic augmentation of cases.

Images are resampled with trilinear and masks with nearest-neighbour
interpolation. Augmentation draws one smooth random displacement field per
slice and applies it to every map (bilinear) and every zone mask (nearest)
of that slice, so the zone relations survive exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from sklearn.base import BaseEstimator, TransformerMixin

from .core import CaseRecord, MaskSet, VolumeGrid
from .errors import ConfigError, ShapeError
from .rng import as_rng

__all__ = [
    "PrepConfig",
    "ElasticParams",
    "resample",
    "resample_mask",
    "center_crop",
    "preprocess_case",
    "gaussian_kernel",
    "sample_displacement",
    "warp",
    "augment_case",
    "CasePreprocessor",
    "ElasticAugmenter",
]


@dataclass(frozen=True)
class PrepConfig:
    target_spacing_mm: float = 0.5
    crop_size: tuple = (256, 256)
    image_interp: str = "linear"
    mask_interp: str = "nearest"

    def __post_init__(self):
        crop = self.crop_size
        crop = (int(crop), int(crop)) if np.isscalar(crop) else tuple(int(c) for c in crop)
        object.__setattr__(self, "crop_size", crop)
        if not self.target_spacing_mm > 0:
            raise ConfigError("target_spacing_mm must be > 0")
        if len(crop) != 2 or any(c <= 0 or c % 2 for c in crop):
            raise ConfigError(f"crop_size must be two even positive integers, got {crop}")
        if self.image_interp != "linear" or self.mask_interp != "nearest":
            raise ConfigError("supported interpolation: image 'linear', mask 'nearest'")


@dataclass(frozen=True)
class ElasticParams:
    """Elastic deformation settings.

    ``alpha`` is the displacement amplitude in pixels; ``sigma`` the std of
    the Gaussian smoothing the uniform noise, in pixels.
    """

    alpha: float = 21.0
    sigma: float = 512.0
    n_augment: int = 9

    def __post_init__(self):
        if self.alpha < 0 or not self.sigma > 0 or self.n_augment < 0:
            raise ConfigError("need alpha >= 0, sigma > 0 and n_augment >= 0")


# --- resampling --------------------------------------------------------------


def _out_len(n, spacing, target):
    return max(1, int(math.floor(n * spacing / target + 0.5)))


def _positions(n_in, spacing, target):
    n_out = _out_len(n_in, spacing, target)
    # voxel-centre alignment: physical centre of output j is (j + 0.5) * target
    return (np.arange(n_out) + 0.5) * (target / spacing) - 0.5


def _linear_axis(a, axis, pos):
    n = a.shape[axis]
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = pos - i0
    shape = [1] * a.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    lo = np.take(a, i0, axis=axis)
    # lo + (hi - lo) * w reproduces constants exactly
    return lo + (np.take(a, i1, axis=axis) - lo) * w


def _nearest_axis(a, axis, pos):
    n = a.shape[axis]
    idx = np.clip(np.floor(pos + 0.5), 0, n - 1).astype(np.intp)
    return np.take(a, idx, axis=axis)


def _resample_array(values, spacing, target, kind):
    out = values
    step = _linear_axis if kind == "linear" else _nearest_axis
    # numpy axes (z, y, x) against spacing (x, y, z)
    for axis, s in zip((2, 1, 0), spacing):
        if s == target:
            continue
        out = step(out, axis, _positions(out.shape[axis], s, target))
    return out


def resample(v, cfg=None):
    """Resample a volume to isotropic ``cfg.target_spacing_mm``."""
    cfg = cfg or PrepConfig()
    t = float(cfg.target_spacing_mm)
    values = _resample_array(np.asarray(v.values, dtype=np.float64), v.spacing_mm, t, "linear")
    return VolumeGrid(v.kind, values.astype(v.values.dtype), (t, t, t))


def resample_mask(m, cfg=None):
    cfg = cfg or PrepConfig()
    t = float(cfg.target_spacing_mm)
    planes = [_resample_array(getattr(m, z), m.spacing_mm, t, "nearest") for z in ("pg", "cz", "pz")]
    return MaskSet(*planes, spacing_mm=(t, t, t))


# --- cropping ----------------------------------------------------------------


def _crop_array(a, size):
    ch, cw = size[1], size[0]
    ny, nx = a.shape[-2:]
    y0, x0 = (ny - ch) // 2, (nx - cw) // 2
    out = np.zeros(a.shape[:-2] + (ch, cw), dtype=a.dtype)
    sy0, sy1 = max(y0, 0), min(y0 + ch, ny)
    sx0, sx1 = max(x0, 0), min(x0 + cw, nx)
    out[..., sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = a[..., sy0:sy1, sx0:sx1]
    return out


def center_crop(v, cfg=None):
    """Crop (or zero-pad) every slice to ``cfg.crop_size`` about the centre.

    ``crop_size`` is ``(width, height)``. Works on volumes and mask sets.
    """
    cfg = cfg or PrepConfig()
    if isinstance(v, MaskSet):
        return MaskSet(*(_crop_array(getattr(v, z), cfg.crop_size) for z in ("pg", "cz", "pz")), v.spacing_mm)
    return v.replace(values=_crop_array(v.values, cfg.crop_size))


def preprocess_case(case, cfg=None):
    """Resample and crop all maps and the truth masks of one case."""
    cfg = cfg or PrepConfig()
    maps = {k: center_crop(resample(v, cfg), cfg) for k, v in case.maps.items()}
    truth = None if case.truth is None else center_crop(resample_mask(case.truth, cfg), cfg)
    return case.with_(maps=maps, truth=truth)


# --- elastic deformation -----------------------------------------------------


def gaussian_kernel(sigma, max_radius):
    """Normalised Gaussian truncated at ``min(ceil(3 sigma), max_radius)``."""
    radius = int(min(math.ceil(3.0 * sigma), max(max_radius, 0)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def sample_displacement(shape, params=None, rng=None):
    """Draw a smooth displacement field for one slice.

    Returns an array of shape ``(2, ny, nx)`` holding ``(dx, dy)`` in pixels:
    i.i.d. uniform noise on [-1, 1], smoothed with a normalised separable
    Gaussian and scaled by ``alpha``. Since the kernel sums to one, every
    component is bounded by ``alpha``.
    """
    params = params or ElasticParams()
    rng = as_rng(rng)
    ny, nx = (int(s) for s in shape)
    noise = rng.uniform(-1.0, 1.0, (2, ny, nx))
    if params.alpha == 0:
        return np.zeros((2, ny, nx))
    field = correlate1d(noise, gaussian_kernel(params.sigma, nx - 1), axis=2, mode="reflect")
    field = correlate1d(field, gaussian_kernel(params.sigma, ny - 1), axis=1, mode="reflect")
    return params.alpha * np.clip(field, -1.0, 1.0)


def warp(image, field, interp="linear"):
    """Sample ``image`` at ``x + d(x)``; reads outside the slice return 0.

    ``image`` has shape ``(..., ny, nx)``; leading axes share the field.
    ``interp`` is ``"linear"`` (bilinear) or ``"nearest"``.
    """
    image = np.asarray(image)
    field = np.asarray(field)
    ny, nx = image.shape[-2:]
    if field.shape != (2, ny, nx):
        raise ShapeError(f"field shape {field.shape} does not match slice shape {(ny, nx)}")
    yy, xx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    sx = xx + field[0]
    sy = yy + field[1]
    flat = image.reshape((-1, ny * nx))
    if interp == "linear":
        flat = flat.astype(np.float64)

    def gather(iy, ix):
        ok = (iy >= 0) & (iy < ny) & (ix >= 0) & (ix < nx)
        idx = np.where(ok, iy, 0) * nx + np.where(ok, ix, 0)
        return np.where(ok, flat[:, idx.ravel()].reshape((-1, ny, nx)), 0)

    if interp == "nearest":
        out = gather(np.floor(sy + 0.5).astype(np.intp), np.floor(sx + 0.5).astype(np.intp))
        return out.reshape(image.shape).astype(image.dtype)
    if interp != "linear":
        raise ValueError(f"unknown interpolation {interp!r}")
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    out = (
        gather(y0, x0) * ((1 - fy) * (1 - fx))
        + gather(y0, x0 + 1) * ((1 - fy) * fx)
        + gather(y0 + 1, x0) * (fy * (1 - fx))
        + gather(y0 + 1, x0 + 1) * (fy * fx)
    )
    out = out.reshape(image.shape)
    if image.dtype.kind in "fc":
        return out.astype(image.dtype)
    return out


def augment_case(case, params=None, rng=None):
    """Return ``params.n_augment`` elastically deformed copies of ``case``.

    Copy ``k`` is named ``<case_id>_aug<k>``. One field is drawn per slice and
    shared by all maps and all masks of that slice.
    """
    params = params or ElasticParams()
    rng = as_rng(rng)
    nz, ny, nx = case.shape
    out = []
    for k in range(1, params.n_augment + 1):
        fields = [sample_displacement((ny, nx), params, rng) for _ in range(nz)]
        maps = {}
        for kind, vol in case.maps.items():
            values = np.stack([warp(vol.values[z], fields[z], "linear") for z in range(nz)])
            maps[kind] = vol.replace(values=values)
        truth = None
        if case.truth is not None:
            stack = case.truth.stack()
            warped = np.stack([warp(stack[:, z], fields[z], "nearest") for z in range(nz)], axis=1)
            truth = MaskSet.from_stack(warped, case.truth.spacing_mm)
        meta = dict(case.meta, augmented_from=case.case_id, augment_index=k)
        out.append(CaseRecord(f"{case.case_id}_aug{k}", maps, truth, case.split_tag, meta))
    return out


# --- estimator wrappers ------------------------------------------------------


class CasePreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer resampling and cropping lists of cases.

    Parameters
    ----------
    target_spacing_mm : float, default=0.5
    crop_size : int or (int, int), default=256
    """

    def __init__(self, target_spacing_mm=0.5, crop_size=256):
        self.target_spacing_mm = target_spacing_mm
        self.crop_size = crop_size

    def _config(self):
        return PrepConfig(self.target_spacing_mm, self.crop_size)

    def fit(self, cases, y=None):
        self.config_ = self._config()
        return self

    def transform(self, cases):
        cfg = getattr(self, "config_", None) or self._config()
        return [preprocess_case(c, cfg) for c in cases]


class ElasticAugmenter(TransformerMixin, BaseEstimator):
    """Expand a list of cases with elastic deformations.

    ``transform`` returns the originals followed by their augmented copies
    (``keep_original=True``) or the copies only. Each case gets its own
    sub-stream split from ``random_state``.
    """

    def __init__(self, alpha=21.0, sigma=512.0, n_augment=9, keep_original=True, random_state=None):
        self.alpha = alpha
        self.sigma = sigma
        self.n_augment = n_augment
        self.keep_original = keep_original
        self.random_state = random_state

    def fit(self, cases, y=None):
        self.params_ = ElasticParams(self.alpha, self.sigma, self.n_augment)
        return self

    def transform(self, cases):
        params = ElasticParams(self.alpha, self.sigma, self.n_augment)
        rng = as_rng(self.random_state)
        cases = list(cases)
        children = rng.spawn(len(cases))
        out = list(cases) if self.keep_original else []
        for case, child in zip(cases, children):
            out.extend(augment_case(case, params, child))
        return out
