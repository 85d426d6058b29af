"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test prints a single ``[ACCEPT n] PASS|FAIL ...`` line and the lines
are repeated in the pytest terminal summary. Run standalone with::

    python3 tests/test_acceptance.py
"""

import json
import math
import time

import numpy as np
import pytest

from zoneforge.cli import dispatch
from zoneforge.core import CANONICAL_COMBOS, CaseRecord, MapKind, MaskSet, VolumeGrid
from zoneforge.dense_unet import ArchConfig, NetworkParams, forward_logits, init_params
from zoneforge.evalkit import dice, hausdorff_mm, tabulate
from zoneforge.phantom import DwiProtocol, PhantomConfig, adc_fit, generate_cases, synth_dwi
from zoneforge.prep import ElasticAugmenter, ElasticParams, augment_case, sample_displacement, warp
from zoneforge.rng import RngState
from zoneforge.trainer import (
    DenseUNetSegmenter,
    MapNormalizer,
    OptimizerConfig,
    _loss_logits,
    _train_network,
    assemble_im,
    assemble_um,
    ce_loss,
    loss_and_grads,
    predict,
)

RESULTS = []


def report(n, title, ok, detail):
    line = f"[ACCEPT {n:>2}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# --- oracles -----------------------------------------------------------------


def _boundary_points(m):
    ny, nx = m.shape
    pts = []
    for y in range(ny):
        for x in range(nx):
            if m[y, x] and any(
                not (0 <= y + dy < ny and 0 <= x + dx < nx) or not m[y + dy, x + dx]
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1))
            ):
                pts.append((y, x))
    return np.array(pts, dtype=np.float64)


def _hausdorff_oracle(a, b, sx, sy):
    pa = _boundary_points(a) * [sy, sx]
    pb = _boundary_points(b) * [sy, sx]
    # every boundary pair, no spatial index
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def _dice_oracle(a, b):
    sa = {tuple(i) for i in np.argwhere(a)}
    sb = {tuple(i) for i in np.argwhere(b)}
    return 1.0 if not sa and not sb else 2 * len(sa & sb) / (len(sa) + len(sb))


def _zone_dice(masks, cases):
    return np.mean([[dice(m.zone(z), c.truth.zone(z)) for z in ("pg", "cz", "pz")] for m, c in zip(masks, cases)], 0)


# --- criteria ----------------------------------------------------------------


def test_01_metric_oracles():
    rs = np.random.default_rng(2025)
    start = time.perf_counter()
    dice_ok = hd_ok = 0
    worst = 0.0
    for _ in range(500):
        ny, nx = rs.integers(2, 17, size=2)
        a = rs.random((ny, nx)) < rs.uniform(0.05, 0.95)
        b = rs.random((ny, nx)) < rs.uniform(0.05, 0.95)
        a.flat[rs.integers(a.size)] = True
        b.flat[rs.integers(b.size)] = True
        sx, sy = rs.uniform(0.25, 2.0, size=2)
        dice_ok += dice(a, b) == _dice_oracle(a, b)
        err = abs(hausdorff_mm(a, b, (sx, sy, 1.0)) - _hausdorff_oracle(a, b, sx, sy))
        worst = max(worst, err)
        hd_ok += err <= 1e-12
    elapsed = time.perf_counter() - start
    ok = dice_ok == 500 and hd_ok == 500 and elapsed < 10
    detail = f"dice exact {dice_ok}/500, HD within 1e-12 {hd_ok}/500 (max err {worst:.1e}), {elapsed:.1f}s"
    assert report(1, "metric oracle equivalence", ok, detail)


def test_02_gradient_correctness():
    start = time.perf_counter()
    arch = ArchConfig(stem_channels=4, growth=2, convs_per_block=2)
    net = init_params(arch, RngState(0), np.float64)
    rs = np.random.default_rng(0)
    x = rs.random((1, 1, 16, 16))
    y = (rs.random((1, 3, 16, 16)) > 0.5).astype(np.float64)
    target = np.ascontiguousarray(y.transpose(0, 2, 3, 1))
    _, grads = loss_and_grads(net, x, y)
    arrays = {k: v.copy() for k, v in net.arrays.items()}

    def loss():
        logits, _ = forward_logits(NetworkParams(arch, arrays), x)
        return _loss_logits(logits.value, target)[0]

    h = 1e-5
    rel = []
    for key, arr in arrays.items():
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + h
            lp = loss()
            arr.flat[i] = old - h
            lm = loss()
            arr.flat[i] = old
            num = (lp - lm) / (2 * h)
            ana = grads[key].flat[i]
            rel.append(abs(ana - num) / max(abs(ana), abs(num), 1e-10))
    rel = np.array(rel)
    frac = float(np.mean(rel <= 1e-3))
    elapsed = time.perf_counter() - start
    ok = frac >= 0.95 and rel.max() <= 1e-2 and elapsed < 120
    detail = f"{rel.size} params, {100 * frac:.1f}% within 1e-3, max rel err {rel.max():.2e}, {elapsed:.0f}s"
    assert report(2, "gradient correctness", ok, detail)


def test_03_ce_spot_values():
    t = (np.random.default_rng(3).random((3, 16, 16)) > 0.5).astype(np.float64)
    half, _ = ce_loss(np.full_like(t, 0.5), t)
    perfect, _ = ce_loss(t, t)
    ok = abs(half - math.log(2)) <= 1e-9 and perfect <= 2e-7
    assert report(3, "CE loss spot values", ok, f"|L(0.5) - ln 2| = {abs(half - math.log(2)):.1e}, L(t, t) = {perfect:.2e}")


def test_04_overfit_reproduction():
    start = time.perf_counter()
    cases = generate_cases(PhantomConfig(), 3, seed=1)
    norm = MapNormalizer().fit(cases)
    samples = assemble_im(cases, "mag", norm)
    opt = OptimizerConfig(lr=1e-3, momentum=0.9, decay=1e-6, batch_size=1, epochs=10)
    init_rng, train_rng = RngState(0).spawn(2)
    net = init_params(ArchConfig(), init_rng)
    step, epochs, scores = 0, 0, np.zeros(3)
    target = np.array([0.95, 0.90, 0.80])
    while epochs < 300:
        net, _, step = _train_network(net, samples, opt, train_rng, step0=step)
        epochs += opt.epochs
        scores = _zone_dice([predict(net, c, "mag", norm) for c in cases], cases)
        if np.all(scores >= target):
            break
    elapsed = time.perf_counter() - start
    ok = bool(np.all(scores >= target)) and elapsed < 15 * 60
    detail = f"Dice PG {scores[0]:.3f} CZ {scores[1]:.3f} PZ {scores[2]:.3f} after {epochs} epochs, {elapsed / 60:.1f} min"
    assert report(4, "overfit reproduction (IM, mag)", ok, detail)


GEN_EPOCHS = 2
GEN_BATCH = 1
SWS_EXTRA_NOISE = 0.3  # m/s, added on top of the phantom texture


def _degrade_sws(cases, rng):
    out = []
    for c in cases:
        v = c.maps[MapKind.SWS]
        noisy = np.maximum(v.values + SWS_EXTRA_NOISE * rng.normal(v.values.shape), 0.0).astype(np.float32)
        out.append(c.with_(maps={**c.maps, MapKind.SWS: v.replace(values=noisy)}))
    return out


def _held_out(train, test, combo):
    est = DenseUNetSegmenter(combo=combo, batch_size=GEN_BATCH, epochs=GEN_EPOCHS, random_state=0)
    est.fit(train)
    return _zone_dice(est.predict(test), test)


def test_05_generalization_trend():
    start = time.perf_counter()
    cases = generate_cases(PhantomConfig(), 25, seed=2024)
    cases = _degrade_sws(cases, RngState(99))
    train, test = cases[:20], cases[20:]
    train = ElasticAugmenter(21.0, 512.0, 9, random_state=5).fit_transform(train)
    mag = _held_out(train, test, "mag")
    sws = _held_out(train, test, "sws")
    elapsed = time.perf_counter() - start
    ok = mag[0] >= 0.85 and sws[0] < mag[0] and elapsed < 2 * 3600
    detail = (
        f"{len(train)} training cases; held-out PG Dice IM(mag) {mag[0]:.3f} vs IM(noisy sws) {sws[0]:.3f}"
        f" (CZ {mag[1]:.3f}/{sws[1]:.3f}, PZ {mag[2]:.3f}/{sws[2]:.3f}), {elapsed / 60:.0f} min"
    )
    assert report(5, "generalization trend", ok, detail)


def test_06_dataset_arithmetic():
    rs = np.random.default_rng(6)
    cases = []
    for i in range(30):
        maps = {k: VolumeGrid(k, rs.random((25, 8, 8)), (1, 1, 1)) for k in MapKind}
        cases.append(CaseRecord(f"c{i}", maps, MaskSet.empty((25, 8, 8), (1, 1, 1))))
    n_im, n_um = len(assemble_im(cases, "mag")), len(assemble_um(cases))
    assert report(6, "dataset arithmetic", n_im == 750 and n_um == 10_500, f"IM {n_im} samples, UM {n_um} samples")


def test_07_unified_model_contract():
    cases = generate_cases(PhantomConfig(), 2, seed=7)
    est = DenseUNetSegmenter(regime="um", batch_size=8, epochs=1, random_state=0).fit(cases[:1])
    valid = 0
    for combo in CANONICAL_COMBOS:
        mask = est.predict(cases[1], combo=combo.name)
        if (
            isinstance(mask, MaskSet)
            and mask.shape == cases[1].shape
            and not (mask.cz & mask.pz).any()
            and not ((mask.cz | mask.pz) & ~mask.pg).any()
        ):
            valid += 1
    ok = valid == 14 and len(est.params_) == 1
    assert report(7, "unified single-model contract", ok, f"{valid}/14 combinations produced valid masks from one checkpoint")


def test_08_tabulation_identity():
    cases = generate_cases(PhantomConfig(), 4, seed=8)
    truths = [c.truth for c in cases]
    tab = tabulate(cases, truths, [MaskSet(*t.stack(), t.spacing_mm) for t in truths])
    same = all(
        (a.mean, a.sd, a.n) == (b.mean, b.sd, b.n)
        for a, b in zip(
            [s for s in tab.stats if s.source == "mask"],
            [s for s in tab.stats if s.source == "predicted"],
        )
    )
    pvals = [r.p for r in tab.pvalues.values() if r is not None]
    ok = same and len(pvals) == 9 and all(p == 1.0 for p in pvals)
    assert report(8, "tabulation identity", ok, f"stats identical: {same}; p-values {sorted(set(pvals))}")


def test_09_adc_round_trip():
    proto = DwiProtocol(b=(0, 50, 500, 1000, 1400))
    rs = np.random.default_rng(9)
    worst = 0.0
    for _ in range(20):
        adc = rs.random((3, 16, 16)) * 3e-3
        adc[0, 0, :4] = 0.0
        s0 = rs.uniform(100, 2000, adc.shape)
        back = adc_fit(synth_dwi(VolumeGrid(MapKind.ADC, adc, (1, 1, 1)), proto, s0=s0), proto).values
        nz = adc > 0
        worst = max(worst, float(np.max(np.abs(back[nz] - adc[nz]) / adc[nz])))
        worst = max(worst, float(np.max(np.abs(back[~nz])) / 1e-3))
    assert report(9, "ADC round trip", worst <= 1e-9, f"max relative error {worst:.1e}")


def test_10_augmentation_invariants():
    case = generate_cases(PhantomConfig(), 1, seed=10)[0]
    params = ElasticParams(21.0, 512.0, 1)
    rng = RngState(10)
    max_disp = 0.0
    ok_masks = 0
    for _ in range(100):
        field = sample_displacement(case.shape[1:], params, rng)
        max_disp = max(max_disp, float(np.abs(field).max()))
        (aug,) = augment_case(case, params, rng)
        t = aug.truth
        binary = all(np.isin(z.view(np.uint8), (0, 1)).all() for z in t.stack())
        ok_masks += binary and not (t.cz & t.pz).any() and not ((t.cz | t.pz) & ~t.pg).any()
    zero = sample_displacement(case.shape[1:], ElasticParams(0.0, 512.0, 1), rng)
    ident = np.array_equal(warp(case.maps[MapKind.MAG].values[4], zero), case.maps[MapKind.MAG].values[4])
    ok = max_disp <= 21.0 and ok_masks == 100 and ident
    detail = f"max |d| {max_disp:.3f} px, {ok_masks}/100 warped mask sets valid, alpha=0 identity: {ident}"
    assert report(10, "augmentation invariants", ok, detail)


def _pipeline(root):
    (root / "phantom.json").write_text(json.dumps({"dims": [32, 32, 4], "pg_semi_axes_mm": [10, 7, 1.5]}))
    (root / "prep.json").write_text(json.dumps({"target_spacing_mm": 1.0, "crop_size": 32}))
    (root / "train.json").write_text(json.dumps({"batch_size": 4, "epochs": 5}))
    base = ["--deterministic"]
    steps = [
        ["phantom", "--config", "phantom.json", "--out", "raw", "--seed", "42", "--count", "5"],
        ["split", "--data", "raw", "--seed", "42"],
        ["prep", "--config", "prep.json", "--data", "raw", "--out", "data"],
        ["train", "--config", "train.json", "--data", "data", "--out", "run", "--combo", "mag", "--seed", "42"],
        ["eval", "--model", "run", "--data", "data", "--split", "test"],
        ["tabulate", "--model", "run", "--data", "data", "--out", "tab"],
    ]
    codes = []
    for argv in steps:
        argv = [str(root / a) if a in ("phantom.json", "prep.json", "train.json", "raw", "data", "run", "tab") else a for a in argv]
        codes.append(dispatch(base + argv))
    return codes


def test_11_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    codes = _pipeline(a) + _pipeline(b)
    compared = [p.relative_to(a) for p in sorted(a.rglob("*")) if p.is_file() and p.suffix in (".ckpt", ".csv", ".mvol", ".mmask")]
    compared = [p for p in compared if p.name != "train_log.csv"]
    diffs = [str(p) for p in compared if (a / p).read_bytes() != (b / p).read_bytes()]
    log_a = [row.rsplit(",", 1)[0] for row in (a / "run" / "train_log.csv").read_text().splitlines()]
    log_b = [row.rsplit(",", 1)[0] for row in (b / "run" / "train_log.csv").read_text().splitlines()]
    ok = all(c == 0 for c in codes) and not diffs and log_a == log_b and len(compared) > 10
    detail = f"{len(compared)} artifacts byte-identical across runs, diffs {diffs or 'none'}, train log epoch/loss identical: {log_a == log_b}"
    assert report(11, "determinism", ok, detail)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
