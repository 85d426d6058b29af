"""Domain value objects: map kinds, volumes, zone masks, cases and input combos.

Arrays are stored in numpy order ``(nz, ny, nx)``, which is x-fastest
row-major as used on disk. ``dims`` and ``spacing_mm`` are always reported
in ``(x, y, z)`` order.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ComboError, InvariantError, ShapeError

__all__ = [
    "MapKind",
    "CANONICAL_ORDER",
    "VolumeGrid",
    "MaskSet",
    "CaseRecord",
    "InputCombo",
    "CANONICAL_COMBOS",
    "validate_combo",
    "ZONES",
]

ZONES = ("pg", "cz", "pz")


class MapKind(enum.Enum):
    T2W = "t2w"
    DWI_B = "dwi_b"
    ADC = "adc"
    MAG = "mag"
    SWS = "sws"
    PHI = "phi"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise ValueError(f"unknown map kind {name!r}") from None

    @property
    def slot(self):
        """Position in the canonical channel order."""
        return CANONICAL_ORDER.index(self)


CANONICAL_ORDER = (
    MapKind.T2W,
    MapKind.DWI_B,
    MapKind.ADC,
    MapKind.MAG,
    MapKind.SWS,
    MapKind.PHI,
)

_UPPER = {
    MapKind.SWS: math.inf,
    MapKind.PHI: math.pi / 2,
}


def _as_triple(values, cast, name):
    t = tuple(cast(v) for v in values)
    if len(t) != 3:
        raise ShapeError(f"{name} must have three entries, got {len(t)}")
    return t


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """One scalar 3D map with its voxel spacing.

    Parameters
    ----------
    kind : MapKind
    values : ndarray of shape (nz, ny, nx)
        float32 or float64; stored read-only.
    spacing_mm : tuple of float
        Voxel size ``(sx, sy, sz)`` in millimetres.
    """

    kind: MapKind
    values: np.ndarray
    spacing_mm: tuple

    def __post_init__(self):
        kind = MapKind.parse(self.kind)
        values = np.asarray(self.values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ShapeError(f"volume values must be a non-empty 3D array, got shape {values.shape}")
        spacing = _as_triple(self.spacing_mm, float, "spacing_mm")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise InvariantError(f"spacing must be positive and finite, got {spacing}")
        if not np.all(np.isfinite(values)):
            raise InvariantError(f"{kind.value} volume contains non-finite values")
        if values.size and values.min() < 0:
            raise InvariantError(f"{kind.value} volume contains negative values")
        upper = _UPPER.get(kind)
        if upper is not None and values.size and values.max() > upper:
            raise InvariantError(f"{kind.value} values exceed {upper}")
        values = np.array(values, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def dims(self):
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    def __eq__(self, other):
        if not isinstance(other, VolumeGrid):
            return NotImplemented
        return (
            self.kind is other.kind
            and self.spacing_mm == other.spacing_mm
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def replace(self, values=None, spacing_mm=None, kind=None):
        return VolumeGrid(
            kind=self.kind if kind is None else kind,
            values=self.values if values is None else values,
            spacing_mm=self.spacing_mm if spacing_mm is None else spacing_mm,
        )


@dataclass(frozen=True, eq=False)
class MaskSet:
    """Ground-truth or predicted masks for gland, central and peripheral zone.

    The zones must be disjoint (``cz & pz`` empty) and lie inside the gland.
    Violations raise :class:`InvariantError`; nothing is silently repaired.
    """

    pg: np.ndarray
    cz: np.ndarray
    pz: np.ndarray
    spacing_mm: tuple

    def __post_init__(self):
        arrays = {}
        for name in ZONES:
            a = np.asarray(getattr(self, name))
            if a.dtype != np.bool_:
                if not np.all((a == 0) | (a == 1)):
                    raise InvariantError(f"{name} mask is not binary")
                a = a.astype(bool)
            if a.ndim != 3:
                raise ShapeError(f"{name} mask must be 3D, got shape {a.shape}")
            arrays[name] = a
        shapes = {a.shape for a in arrays.values()}
        if len(shapes) != 1:
            raise ShapeError(f"zone masks differ in shape: {sorted(shapes)}")
        pg, cz, pz = arrays["pg"], arrays["cz"], arrays["pz"]
        if np.any(cz & pz):
            raise InvariantError(f"cz and pz overlap in {int(np.count_nonzero(cz & pz))} voxels")
        if np.any(cz & ~pg) or np.any(pz & ~pg):
            raise InvariantError("cz/pz voxels outside pg")
        spacing = _as_triple(self.spacing_mm, float, "spacing_mm")
        if not all(s > 0 for s in spacing):
            raise InvariantError(f"spacing must be positive, got {spacing}")
        for name, a in arrays.items():
            a = np.array(a, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "spacing_mm", spacing)

    @classmethod
    def empty(cls, shape, spacing_mm):
        z = np.zeros(shape, dtype=bool)
        return cls(z, z, z, spacing_mm)

    @classmethod
    def from_stack(cls, stack, spacing_mm):
        """Build from an array whose leading axis holds (pg, cz, pz)."""
        return cls(stack[0], stack[1], stack[2], spacing_mm)

    @property
    def shape(self):
        return self.pg.shape

    @property
    def dims(self):
        nz, ny, nx = self.pg.shape
        return (nx, ny, nz)

    def zone(self, name):
        return getattr(self, name.lower())

    def stack(self):
        return np.stack([self.pg, self.cz, self.pz])

    def __eq__(self, other):
        if not isinstance(other, MaskSet):
            return NotImplemented
        return self.spacing_mm == other.spacing_mm and all(
            np.array_equal(getattr(self, z), getattr(other, z)) for z in ZONES
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CaseRecord:
    """One subject: a subset of the six maps plus its zone masks."""

    case_id: str
    maps: dict
    truth: MaskSet | None = None
    split_tag: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split_tag not in ("train", "test"):
            raise InvariantError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")
        maps = {}
        for key, vol in self.maps.items():
            kind = MapKind.parse(key)
            if vol.kind is not kind:
                raise InvariantError(f"map stored under {kind.value} has kind {vol.kind.value}")
            maps[kind] = vol
        geoms = {(v.values.shape, v.spacing_mm) for v in maps.values()}
        if self.truth is not None:
            geoms.add((self.truth.shape, self.truth.spacing_mm))
        if len(geoms) > 1:
            raise ShapeError(f"case {self.case_id}: maps and masks disagree in geometry: {sorted(geoms)}")
        ordered = {k: maps[k] for k in CANONICAL_ORDER if k in maps}
        object.__setattr__(self, "maps", ordered)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def shape(self):
        if self.maps:
            return next(iter(self.maps.values())).values.shape
        if self.truth is not None:
            return self.truth.shape
        raise ShapeError(f"case {self.case_id} holds no data")

    @property
    def spacing_mm(self):
        if self.maps:
            return next(iter(self.maps.values())).spacing_mm
        return self.truth.spacing_mm

    @property
    def n_slices(self):
        return self.shape[0]

    def with_(self, **changes):
        kw = dict(
            case_id=self.case_id,
            maps=self.maps,
            truth=self.truth,
            split_tag=self.split_tag,
            meta=self.meta,
        )
        kw.update(changes)
        return CaseRecord(**kw)

    def __eq__(self, other):
        if not isinstance(other, CaseRecord):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.split_tag == other.split_tag
            and self.maps.keys() == other.maps.keys()
            and all(self.maps[k] == other.maps[k] for k in self.maps)
            and self.truth == other.truth
        )

    __hash__ = None


@dataclass(frozen=True)
class InputCombo:
    """A canonical, ordered, non-empty subset of map kinds."""

    kinds: tuple

    @property
    def name(self):
        return "+".join(k.value for k in self.kinds)

    @property
    def n_channels(self):
        return len(self.kinds)

    def __str__(self):
        return self.name

    def __iter__(self):
        return iter(self.kinds)

    def __len__(self):
        return len(self.kinds)


def _combo(*names):
    kinds = {MapKind.parse(n) for n in names}
    return InputCombo(tuple(k for k in CANONICAL_ORDER if k in kinds))


# Row order of the results tables.
CANONICAL_COMBOS = (
    _combo("mag", "sws", "phi"),
    _combo("sws", "mag"),
    _combo("sws", "phi"),
    _combo("mag", "phi"),
    _combo("mag"),
    _combo("phi"),
    _combo("sws"),
    _combo("t2w", "adc", "dwi_b"),
    _combo("t2w", "adc"),
    _combo("t2w", "dwi_b"),
    _combo("adc", "dwi_b"),
    _combo("t2w"),
    _combo("adc"),
    _combo("dwi_b"),
)
_COMBO_SET = {c.kinds: c for c in CANONICAL_COMBOS}


def validate_combo(names):
    """Return the canonical :class:`InputCombo` for a list of map names.

    Accepts names in any order and case, or an ``"a+b"`` string.

    Raises
    ------
    ComboError
        If the set is empty, contains unknown names or is not one of the 14
        canonical combinations.
    """
    if isinstance(names, InputCombo):
        names = [k.value for k in names.kinds]
    elif isinstance(names, str):
        names = [n for n in names.split("+") if n.strip()]
    try:
        kinds = {MapKind.parse(n) for n in names}
    except ValueError as exc:
        raise ComboError(str(exc)) from None
    key = tuple(k for k in CANONICAL_ORDER if k in kinds)
    if key not in _COMBO_SET:
        label = "+".join(k.value for k in key) or "<empty>"
        raise ComboError(f"input combination {label} is not one of the 14 canonical combinations")
    return _COMBO_SET[key]


def all_nonempty_subsets():
    """Yield every non-empty subset of the six kinds in canonical order."""
    for r in range(1, len(CANONICAL_ORDER) + 1):
        yield from itertools.combinations(CANONICAL_ORDER, r)
