import math

import numpy as np
import pytest

from zoneforge.core import CANONICAL_ORDER, CaseRecord, MapKind, MaskSet, VolumeGrid
from zoneforge.dense_unet import ArchConfig, NetworkParams, init_params
from zoneforge.errors import ConfigError, DataError
from zoneforge.rng import RngState
from zoneforge.trainer import (
    DenseUNetSegmenter,
    MapNormalizer,
    OptimizerConfig,
    Regime,
    TrainLog,
    assemble_im,
    assemble_um,
    ce_loss,
    fit,
    predict,
    repair_zones,
    sgd_step,
)


def _tiny_case(i, nz=25, n=8, kinds=CANONICAL_ORDER):
    rs = np.random.default_rng(i)
    maps = {k: VolumeGrid(k, rs.random((nz, n, n)) * 0.5, (1, 1, 1)) for k in kinds}
    pg = np.zeros((nz, n, n), bool)
    pg[:, 2:6, 2:6] = True
    cz = pg.copy()
    cz[:, 4:, :] = False
    return CaseRecord(f"t{i:02d}", maps, MaskSet(pg, cz, pg & ~cz, (1, 1, 1)))


def test_loss_at_one_half():
    t = (np.random.default_rng(0).random((3, 8, 8)) > 0.5).astype(float)
    loss, _ = ce_loss(np.full_like(t, 0.5), t)
    assert loss == pytest.approx(math.log(2), abs=1e-9)


def test_loss_single_pixel_and_perfect():
    loss, _ = ce_loss(np.array([0.9]), np.array([1.0]))
    assert loss == pytest.approx(-math.log(0.9), abs=1e-12)
    assert loss == pytest.approx(0.105361, abs=1e-6)
    t = (np.random.default_rng(1).random((2, 4, 4)) > 0.5).astype(float)
    assert ce_loss(t, t)[0] <= 2e-7


def test_loss_gradient_fd(rs):
    p = rs.uniform(0.05, 0.95, (8, 8))
    t = (rs.random((8, 8)) > 0.5).astype(float)
    _, g = ce_loss(p, t)
    h = 1e-6
    for i in range(p.size):
        q = p.copy()
        q.flat[i] += h
        lp = ce_loss(q, t)[0]
        q.flat[i] -= 2 * h
        lm = ce_loss(q, t)[0]
        num = (lp - lm) / (2 * h)
        assert abs(num - g.flat[i]) <= 1e-6 * max(abs(num), abs(g.flat[i]))


def test_lr_schedule():
    cfg = OptimizerConfig(lr=1e-3, decay=1e-6)
    assert cfg.lr_at(0) == 1e-3
    assert cfg.lr_at(10**6) == pytest.approx(5e-4, rel=1e-15)
    assert OptimizerConfig(decay_mode="weight").lr_at(10**6) == 1e-3


def test_plain_sgd_step():
    cfg = OptimizerConfig(lr=0.1, momentum=0.0, decay=0.0)
    new, _ = sgd_step({"w": np.array([1.0])}, {"w": np.array([2.0])}, {}, cfg, 0)
    assert new["w"][0] == pytest.approx(0.8, abs=1e-15)


def test_momentum_accumulates():
    cfg = OptimizerConfig(lr=1.0, momentum=0.5, decay=0.0)
    p, s = {"w": np.zeros(1)}, {}
    p, s = sgd_step(p, {"w": np.ones(1)}, s, cfg, 0)
    p, s = sgd_step(p, {"w": np.ones(1)}, s, cfg, 1)
    assert p["w"][0] == pytest.approx(-2.5)


def test_optimizer_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        Regime("im")


def test_sample_counts():
    cases = [_tiny_case(i) for i in range(30)]
    im = assemble_im(cases, "mag")
    assert len(im) == 750 and im[0].input.shape == (1, 8, 8)
    assert assemble_im(cases[:1], "mag+sws+phi")[0].input.shape == (3, 8, 8)
    um = assemble_um(cases)
    assert len(um) == 10_500


def test_unified_zero_fill():
    case = _tiny_case(0, nz=2)
    norm = MapNormalizer().fit([case])
    um = assemble_um([case], norm)
    mag = next(s for s in um if s.combo.name == "mag").input
    assert mag.shape == (6, 8, 8)
    assert [bool(mag[i].any()) for i in range(6)] == [False, False, False, True, False, False]
    mri = next(s for s in um if s.combo.name == "t2w+dwi_b+adc").input
    assert [bool(mri[i].any()) for i in range(6)] == [True, True, True, False, False, False]


def test_missing_map_is_data_error():
    case = _tiny_case(0, nz=2, kinds=(MapKind.MAG,))
    with pytest.raises(DataError):
        assemble_im([case], "sws")
    with pytest.raises(DataError):
        assemble_um([case])


def test_normalizer_uses_training_cases_only():
    a, b = _tiny_case(1, nz=2), _tiny_case(2, nz=2)
    norm = MapNormalizer().fit([a])
    assert norm.case_ids_ == ["t01"]
    z = norm.transform_map(a.maps[MapKind.MAG])
    assert abs(float(z.mean())) < 1e-6 and abs(float(z.std()) - 1) < 1e-5
    back = MapNormalizer.from_stats(norm.to_dict()["stats"])
    assert np.array_equal(back.transform_map(b.maps[MapKind.MAG]), norm.transform_map(b.maps[MapKind.MAG]))


def test_memorise_one_slice(small_case):
    one = small_case.with_(
        maps={k: v.replace(values=v.values[2:3, :, :]) for k, v in small_case.maps.items()},
        truth=MaskSet(*(z[2:3] for z in small_case.truth.stack()), small_case.spacing_mm),
    )
    opt = OptimizerConfig(lr=1e-3, batch_size=1, epochs=200, seed=0)
    net, log, _ = fit(Regime.im("mag"), [one], opt=opt)
    assert log.mean_loss[0] / log.mean_loss[-1] >= 10
    assert log.epochs == list(range(1, 201))


def test_zero_epochs_returns_init(small_case):
    opt = OptimizerConfig(epochs=0, seed=5)
    net, log, _ = fit(Regime.im("mag"), [small_case], opt=opt)
    init_rng, _ = RngState(5).spawn(2)
    assert net == init_params(ArchConfig(), init_rng)
    assert log.epochs == []


def test_training_is_deterministic(small_case, tmp_path):
    opt = OptimizerConfig(batch_size=2, epochs=2, seed=3)
    a = fit(Regime.im("mag"), [small_case], opt=opt, checkpoint_dir=tmp_path / "a")
    b = fit(Regime.im("mag"), [small_case], opt=opt, checkpoint_dir=tmp_path / "b")
    assert a[0] == b[0] and a[1] == b[1]
    for name in ("final.ckpt", "best.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert TrainLog.read_csv(tmp_path / "a" / "train_log.csv") == a[1]


def test_half_is_background(small_case):
    arch = ArchConfig()
    zero = NetworkParams(arch, {k: np.zeros_like(v) for k, v in init_params(arch, 0).arrays.items()})
    norm = MapNormalizer().fit([small_case])
    m = predict(zero, small_case, "mag", norm)
    assert not m.pg.any() and not m.cz.any() and not m.pz.any()


def test_repair_makes_zones_disjoint(rs):
    pg, cz, pz = (rs.random((3, 2, 6, 6)) > 0.4)
    pg, cz, pz = repair_zones(pg, cz, pz)
    assert not (cz & pz).any() and not (cz & ~pg).any() and not (pz & ~pg).any()


def test_estimator_round_trip(small_case, tmp_path):
    est = DenseUNetSegmenter(combo="mag", epochs=1, batch_size=5, random_state=1)
    assert est.get_params()["combo"] == "mag"
    est.fit([small_case])
    masks = est.predict([small_case])
    assert isinstance(masks[0], MaskSet)
    assert 0.0 <= est.score([small_case]) <= 1.0
    est.save(tmp_path / "m.ckpt")
    back = DenseUNetSegmenter.load(tmp_path / "m.ckpt")
    assert back.get_params() == est.get_params()
    assert back.predict(small_case) == masks[0]
    with pytest.raises(ConfigError):
        est.predict([small_case], combo="sws")


def test_per_zone_networks(small_case, tmp_path):
    est = DenseUNetSegmenter(combo="mag", epochs=1, batch_size=5, per_zone=True).fit([small_case])
    assert len(est.params_) == 3 and est.params_[0].arch.out_channels == 1
    est.save(tmp_path / "z.ckpt")
    assert (tmp_path / "z.ckpt.pg").exists()
    assert DenseUNetSegmenter.load(tmp_path / "z.ckpt").predict(small_case) == est.predict(small_case)
