import json
import math

import numpy as np
import pytest

from zoneforge.core import (
    CANONICAL_COMBOS,
    CANONICAL_ORDER,
    CaseRecord,
    MapKind,
    MaskSet,
    VolumeGrid,
    all_nonempty_subsets,
    validate_combo,
)
from zoneforge.errors import ComboError, FormatError, InvariantError, ShapeError
from zoneforge.io import (
    load_dataset,
    read_mask,
    read_volume,
    sidecar,
    write_dataset,
    write_mask,
    write_volume,
)
from zoneforge.rng import RngState, _fill, splitmix64


def test_volume_rejects_negative_and_nan():
    with pytest.raises(InvariantError):
        VolumeGrid(MapKind.SWS, -np.ones((1, 2, 2)), (1, 1, 1))
    with pytest.raises(InvariantError):
        VolumeGrid(MapKind.MAG, np.full((1, 2, 2), np.nan), (1, 1, 1))
    with pytest.raises(InvariantError):
        VolumeGrid(MapKind.PHI, np.full((1, 2, 2), 2.0), (1, 1, 1))


def test_volume_is_read_only():
    v = VolumeGrid(MapKind.MAG, np.ones((1, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        v.values[0, 0, 0] = 3


def test_volume_round_trip_16_bytes(tmp_path):
    v = VolumeGrid(MapKind.MAG, np.array([1, 2, 3, 4], np.float32).reshape(1, 2, 2), (1, 1, 1))
    write_volume(v, tmp_path / "m.mvol")
    assert (tmp_path / "m.mvol").stat().st_size == 16
    header = json.loads(sidecar(tmp_path / "m.mvol").read_text())
    assert header["dims"] == [2, 2, 1] and header["dtype"] == "f32le"
    assert read_volume(tmp_path / "m.mvol") == v


def test_payload_length_mismatch(tmp_path):
    v = VolumeGrid(MapKind.MAG, np.ones((1, 2, 2), np.float32), (1, 1, 1))
    write_volume(v, tmp_path / "m.mvol")
    (tmp_path / "m.mvol").write_bytes(b"\0" * 20)
    with pytest.raises(FormatError):
        read_volume(tmp_path / "m.mvol")


def test_large_sws_round_trip(tmp_path):
    vals = np.random.default_rng(0).random((25, 128, 128)).astype(np.float32) * 3
    v = VolumeGrid(MapKind.SWS, vals, (2, 2, 2))
    write_volume(v, tmp_path / "s.mvol")
    back = read_volume(tmp_path / "s.mvol")
    assert back == v
    assert back.spacing_mm == (2.0, 2.0, 2.0) and back.dims == (128, 128, 25)


def test_float64_round_trip_exact(tmp_path):
    vals = np.random.default_rng(1).random((2, 3, 4))
    v = VolumeGrid(MapKind.ADC, vals * 1e-3, (0.5, 0.5, 2))
    write_volume(v, tmp_path / "a.mvol")
    assert np.array_equal(read_volume(tmp_path / "a.mvol").values, v.values)


def _half_masks():
    pg = np.zeros((1, 4, 4), bool)
    pg[0, 1:3, :] = True
    cz = pg.copy()
    cz[0, :, 2:] = False
    pz = pg & ~cz
    return pg, cz, pz


def test_mask_invariants(tmp_path):
    empty = MaskSet.empty((2, 3, 3), (1, 1, 1))
    write_mask(empty, tmp_path / "e.mmask")
    assert read_mask(tmp_path / "e.mmask") == empty

    pg, cz, pz = _half_masks()
    m = MaskSet(pg, cz, pz, (1, 1, 1))
    write_mask(m, tmp_path / "m.mmask")
    assert read_mask(tmp_path / "m.mmask") == m

    bad = cz.copy()
    bad[0, 0, 0] = True
    with pytest.raises(InvariantError):
        MaskSet(pg, bad, pz, (1, 1, 1))
    with pytest.raises(InvariantError):
        MaskSet(pg, cz, cz, (1, 1, 1))


def test_mask_non_binary_bytes(tmp_path):
    pg, cz, pz = _half_masks()
    write_mask(MaskSet(pg, cz, pz, (1, 1, 1)), tmp_path / "m.mmask")
    raw = bytearray((tmp_path / "m.mmask").read_bytes())
    raw[0] = 2
    (tmp_path / "m.mmask").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_mask(tmp_path / "m.mmask")


def test_case_geometry_must_agree():
    a = VolumeGrid(MapKind.MAG, np.ones((1, 2, 2)), (1, 1, 1))
    b = VolumeGrid(MapKind.SWS, np.ones((1, 2, 3)), (1, 1, 1))
    with pytest.raises((InvariantError, ShapeError)):
        CaseRecord("c", {MapKind.MAG: a, MapKind.SWS: b})


def test_combo_canonicalisation():
    assert validate_combo(["sws", "mag"]).kinds == (MapKind.MAG, MapKind.SWS)
    assert validate_combo(["mag"]).kinds == (MapKind.MAG,)
    assert validate_combo("SWS+mag") is validate_combo(["mag", "sws"])
    with pytest.raises(ComboError):
        validate_combo(["t2w", "sws"])
    with pytest.raises(ComboError):
        validate_combo([])


def test_exactly_14_of_63_subsets_accepted():
    subsets = list(all_nonempty_subsets())
    assert len(subsets) == 63
    ok = []
    for s in subsets:
        try:
            ok.append(validate_combo([k.value for k in s]))
        except ComboError:
            pass
    assert len(ok) == 14 and set(ok) == set(CANONICAL_COMBOS)
    assert CANONICAL_ORDER[0] is MapKind.T2W and MapKind.PHI.slot == 5


def test_dataset_round_trip(tmp_path, small_case):
    write_dataset([small_case], tmp_path)
    (back,) = load_dataset(tmp_path)
    assert back == small_case
    assert load_dataset(tmp_path, split="test") == []


def test_splitmix_and_xoshiro_reference():
    # xoshiro256** from state {1, 2, 3, 4}: reference outputs of the C code
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    out = np.empty(4, dtype=np.uint64)
    _fill(state, out)
    assert [int(v) for v in out] == [11520, 0, 1509978240, 1215971899390074240]
    _, first = splitmix64(0)
    assert first == 0xE220A8397B1DCDAF
    restored = RngState.from_state(RngState(7, counter=5).state_dict())
    assert np.array_equal(restored.next_u64(3), RngState(7, counter=5).next_u64(3))


def test_rng_determinism_and_ranges():
    a, b = RngState(5), RngState(5)
    assert np.array_equal(a.normal(100), b.normal(100))
    u = RngState(9).random(10_000)
    assert u.min() >= 0 and u.max() < 1 and abs(u.mean() - 0.5) < 0.02
    n = RngState(9).normal(20_000)
    assert abs(n.mean()) < 0.03 and abs(n.std() - 1) < 0.03
    assert sorted(RngState(1).permutation(10)) == list(range(10))
    c1, c2 = RngState(3).spawn(2)
    assert not np.array_equal(c1.random(4), c2.random(4))
    assert math.isfinite(float(RngState(0).uniform(-1, 1, 3).sum()))
