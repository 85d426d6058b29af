"""Loss, optimiser, dataset assembly and the segmentation estimator.

Two training regimes are supported:

* individual model (IM): one network per input combination, with as many
  input channels as maps in the combination;
* unified model (UM): one network with a fixed six-slot input in canonical
  order, trained on every slice under all 14 combinations, absent maps
  zero-filled.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import CANONICAL_COMBOS, CANONICAL_ORDER, ZONES, CaseRecord, InputCombo, MapKind, MaskSet, validate_combo
from .dense_unet import ArchConfig, NetworkParams, forward_logits, init_params, load_checkpoint, save_checkpoint, sigmoid
from .errors import ConfigError, DataError, ShapeError, TrainError
from .rng import RngState, as_rng

logger = logging.getLogger(__name__)

__all__ = [
    "EPS",
    "OptimizerConfig",
    "Regime",
    "TrainSample",
    "TrainLog",
    "MapNormalizer",
    "ce_loss",
    "sgd_step",
    "assemble_im",
    "assemble_um",
    "fit",
    "predict",
    "repair_zones",
    "DenseUNetSegmenter",
]

EPS = 1e-7


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD settings. ``decay`` is a per-update learning-rate decay
    ``lr_t = lr / (1 + decay * t)`` unless ``decay_mode == "weight"``, in
    which case it is an L2 weight-decay coefficient and the rate is fixed.
    """

    lr: float = 1e-3
    momentum: float = 0.9
    decay: float = 1e-6
    batch_size: int = 25
    epochs: int = 1
    seed: int = 0
    decay_mode: str = "lr"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("need decay >= 0, batch_size >= 1, epochs >= 0")
        if self.decay_mode not in ("lr", "weight"):
            raise ConfigError("decay_mode must be 'lr' or 'weight'")

    def lr_at(self, t):
        if self.decay_mode == "weight":
            return self.lr
        return self.lr / (1.0 + self.decay * t)


@dataclass(frozen=True)
class Regime:
    kind: str = "im"
    combo: InputCombo | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in ("im", "um"):
            raise ConfigError(f"regime must be 'im' or 'um', got {self.kind!r}")
        combo = self.combo
        if kind == "im":
            if combo is None:
                raise ConfigError("an individual-model regime needs an input combination")
            combo = validate_combo(combo)
        elif combo is not None:
            raise ConfigError("the unified regime takes no fixed combination")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "combo", combo)

    @classmethod
    def im(cls, combo):
        return cls("im", validate_combo(combo))

    @classmethod
    def um(cls):
        return cls("um")

    @property
    def in_channels(self):
        return self.combo.n_channels if self.kind == "im" else len(CANONICAL_ORDER)

    def __str__(self):
        return f"im:{self.combo.name}" if self.kind == "im" else "um"


# --- loss and optimiser ------------------------------------------------------


def ce_loss(pred, target, eps=EPS):
    """Pixel-wise binary cross-entropy, averaged over every pixel and channel.

    The loss compares a prediction ``p`` with a binary mask ``t``::

        -(t * log(p) + (1 - t) * log(1 - p))

    (written with the symbols swapped in some references; for binary targets
    the two forms coincide). ``pred`` is clipped to ``[eps, 1 - eps]``.

    Returns
    -------
    loss : float
    grad : ndarray
        ``(p - t) / (p (1 - p)) / N`` evaluated at the clipped prediction.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    p = np.clip(pred, eps, 1.0 - eps)
    n = p.size
    loss = -np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p)) / n
    grad = (p - target) / (p * (1.0 - p)) / n
    return float(loss), grad


def _loss_logits(logits, target, eps=EPS):
    """CE loss from logits and its gradient w.r.t. the logits.

    Equals ``ce_loss(sigmoid(z))`` chained through the sigmoid, with the
    clip treated as identity in the backward pass so saturated wrong pixels
    keep a gradient.
    """
    p = np.clip(sigmoid(logits.astype(np.float64)), eps, 1.0 - eps)
    t = target.astype(np.float64)
    n = p.size
    loss = -np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)) / n
    return float(loss), ((p - t) / n).astype(logits.dtype)


def sgd_step(params, grads, state, cfg, t):
    """One momentum-SGD update.

    ``v <- momentum * v + g`` and ``w <- w - lr_t * v`` with
    ``lr_t = lr / (1 + decay * t)``. ``params``, ``grads`` and ``state`` are
    dicts of arrays keyed alike; new dicts are returned.
    """
    lr = cfg.lr_at(t)
    new_params, new_state = {}, {}
    for key, w in params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(w)
        if cfg.decay_mode == "weight" and cfg.decay:
            g = g + cfg.decay * w
        v = state.get(key)
        v = g if v is None else cfg.momentum * v + g
        new_state[key] = v.astype(w.dtype, copy=False)
        new_params[key] = (w - lr * v).astype(w.dtype, copy=False)
    return new_params, new_state


# --- dataset assembly --------------------------------------------------------


class MapNormalizer(TransformerMixin, BaseEstimator):
    """Per-map-kind z-scoring with statistics from the training population.

    Attributes
    ----------
    stats_ : dict
        ``{map name: (mean, sd)}`` over all voxels of all fitted cases.
    case_ids_ : list of str
        Cases the statistics were computed from.
    """

    def fit(self, cases, y=None):
        sums = {}
        for case in cases:
            for kind, vol in case.maps.items():
                v = vol.values.astype(np.float64)
                s = sums.setdefault(kind, [0, 0.0, 0.0])
                s[0] += v.size
                s[1] += v.sum()
                s[2] += np.square(v).sum()
        self.stats_ = {}
        for kind in CANONICAL_ORDER:
            if kind in sums:
                n, s1, s2 = sums[kind]
                mean = s1 / n
                sd = math.sqrt(max(s2 / n - mean * mean, 0.0))
                self.stats_[kind.value] = (mean, sd if sd > 0 else 1.0)
        self.case_ids_ = [c.case_id for c in cases]
        return self

    @classmethod
    def from_stats(cls, stats, case_ids=()):
        norm = cls()
        norm.stats_ = {MapKind.parse(k).value: (float(m), float(s)) for k, (m, s) in stats.items()}
        norm.case_ids_ = list(case_ids)
        return norm

    def transform_map(self, vol):
        check_is_fitted(self, "stats_")
        if vol.kind.value not in self.stats_:
            raise DataError(f"no normalisation statistics for map {vol.kind.value}")
        mean, sd = self.stats_[vol.kind.value]
        return ((vol.values.astype(np.float64) - mean) / sd).astype(np.float32)

    def transform(self, cases):
        return [{k: self.transform_map(v) for k, v in c.maps.items()} for c in cases]

    def to_dict(self):
        return {"stats": {k: list(v) for k, v in self.stats_.items()}, "case_ids": list(self.case_ids_)}


@dataclass(eq=False)
class TrainSample:
    """One training slice. ``input`` is built on demand from the shared
    per-case normalised stack, zero-filling slots in the unified layout."""

    case_id: str
    slice_index: int
    combo: InputCombo
    target: np.ndarray
    source: dict = field(repr=False, default_factory=dict)
    unified: bool = False

    @property
    def input(self):
        if self.unified:
            shape = self.target.shape[1:]
            x = np.zeros((len(CANONICAL_ORDER),) + shape, dtype=np.float32)
            for kind in self.combo:
                x[kind.slot] = self.source[kind][self.slice_index]
            return x
        return np.stack([self.source[k][self.slice_index] for k in self.combo])


def _check_maps(case, kinds):
    missing = [k.value for k in kinds if k not in case.maps]
    if missing:
        raise DataError(f"case {case.case_id} lacks map(s) {', '.join(missing)}")


def _targets(case):
    if case.truth is None:
        raise DataError(f"case {case.case_id} has no ground-truth masks")
    return case.truth.stack().astype(np.float32)


def assemble_im(cases, combo, normalizer=None):
    """Slice-wise samples for one input combination (one per case slice)."""
    combo = validate_combo(combo)
    for case in cases:
        _check_maps(case, combo.kinds)
    if normalizer is None:
        normalizer = MapNormalizer().fit(cases)
    samples = []
    for case in cases:
        source = {k: normalizer.transform_map(case.maps[k]) for k in combo}
        target = _targets(case)
        for z in range(case.n_slices):
            samples.append(TrainSample(case.case_id, z, combo, target[:, z], source))
    return samples


def assemble_um(cases, normalizer=None, combos=CANONICAL_COMBOS):
    """Unified samples: every slice under each of the 14 combinations."""
    for case in cases:
        _check_maps(case, CANONICAL_ORDER)
    if normalizer is None:
        normalizer = MapNormalizer().fit(cases)
    samples = []
    for case in cases:
        source = {k: normalizer.transform_map(v) for k, v in case.maps.items()}
        target = _targets(case)
        for z in range(case.n_slices):
            for combo in combos:
                samples.append(TrainSample(case.case_id, z, combo, target[:, z], source, unified=True))
    return samples


def _assemble(regime, cases, normalizer):
    if regime.kind == "im":
        return assemble_im(cases, regime.combo, normalizer)
    return assemble_um(cases, normalizer)


# --- training ----------------------------------------------------------------


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    mean_loss: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def append(self, epoch, loss, wall):
        self.epochs.append(int(epoch))
        self.mean_loss.append(float(loss))
        self.wall_time.append(float(wall))

    def __eq__(self, other):
        # wall time is not part of the reproducible record
        if not isinstance(other, TrainLog):
            return NotImplemented
        return self.epochs == other.epochs and self.mean_loss == other.mean_loss

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "wall_time"])
            for row in zip(self.epochs, self.mean_loss, self.wall_time):
                w.writerow([row[0], repr(row[1]), f"{row[2]:.3f}"])

    @classmethod
    def read_csv(cls, path):
        log = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                log.append(int(row["epoch"]), float(row["mean_loss"]), float(row["wall_time"]))
        return log


def _batch(samples, idx, target_channels):
    x = np.stack([samples[i].input for i in idx])
    y = np.stack([samples[i].target for i in idx])
    if target_channels is not None:
        y = y[:, target_channels]
    return x, y


def loss_and_grads(net, x, y):
    """CE loss of the network on an NCHW batch and its parameter gradients."""
    logits, tape = forward_logits(net, x.astype(net.dtype), record=True)
    target = np.ascontiguousarray(y.transpose(0, 2, 3, 1))
    loss, g = _loss_logits(logits.value, target)
    grads = tape.backward(logits, g)
    return loss, grads


def _train_network(net, samples, opt, rng, target_channels=None, checkpoint_dir=None, extra=None, step0=0):
    log = TrainLog()
    state = {}
    step = step0
    best = math.inf
    start = time.perf_counter()
    n = len(samples)
    for epoch in range(1, opt.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, opt.batch_size):
            idx = order[lo : lo + opt.batch_size]
            x, y = _batch(samples, idx, target_channels)
            loss, grads = loss_and_grads(net, x, y)
            if not math.isfinite(loss):
                raise TrainError(f"loss diverged to {loss} at step {step}", step=step)
            arrays, state = sgd_step(net.arrays, grads, state, opt, step)
            net = NetworkParams(net.arch, arrays)
            total += loss * len(idx)
            step += 1
        mean = total / n
        log.append(epoch, mean, time.perf_counter() - start)
        logger.info("epoch %d/%d mean loss %.6f", epoch, opt.epochs, mean)
        if checkpoint_dir is not None and mean < best:
            best = mean
            save_checkpoint(Path(checkpoint_dir) / "best.ckpt", net, step, rng, dict(extra or {}, epoch=epoch))
    return net, log, step


def fit(regime, cases, arch=None, opt=None, rng=None, normalizer=None, checkpoint_dir=None):
    """Train one Dense U-net under ``regime`` on ``cases``.

    Returns ``(params, log, normalizer)``. Normalisation statistics are
    computed from ``cases`` unless a fitted normalizer is passed. With
    ``checkpoint_dir`` the best (lowest epoch loss) and final checkpoints are
    written there.
    """
    opt = opt or OptimizerConfig()
    rng = as_rng(opt.seed if rng is None else rng)
    if normalizer is None:
        normalizer = MapNormalizer().fit(cases)
    samples = _assemble(regime, cases, normalizer)
    if not samples:
        raise DataError("the assembled training set is empty")
    if arch is None:
        arch = ArchConfig(in_channels=regime.in_channels)
    if arch.in_channels != regime.in_channels:
        raise ShapeError(f"architecture has {arch.in_channels} inputs, regime {regime} needs {regime.in_channels}")
    init_rng, train_rng = rng.spawn(2)
    net = init_params(arch, init_rng)
    extra = _header_extra(regime, normalizer)
    net, log, step = _train_network(net, samples, opt, train_rng, None, checkpoint_dir, extra)
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "final.ckpt", net, step, train_rng, extra)
        log.write_csv(Path(checkpoint_dir) / "train_log.csv")
    return net, log, normalizer


def _header_extra(regime, normalizer):
    return {
        "regime": regime.kind,
        "combo": regime.combo.name if regime.combo else None,
        "normalization": normalizer.to_dict(),
    }


# --- prediction --------------------------------------------------------------


def repair_zones(pg, cz, pz, pz_wins=True):
    """Force zone consistency: both zones inside the gland and disjoint.

    The zone named by the tie rule keeps contested voxels (PZ by default).
    """
    pz = pz & pg
    cz = cz & pg
    if pz_wins:
        cz = cz & ~pz
    else:
        pz = pz & ~cz
    return pg, cz, pz


def _input_stack(case, combo, unified, normalizer):
    _check_maps(case, combo.kinds)
    nz, ny, nx = case.shape
    if unified:
        x = np.zeros((nz, len(CANONICAL_ORDER), ny, nx), dtype=np.float32)
        for kind in combo:
            x[:, kind.slot] = normalizer.transform_map(case.maps[kind])
        return x
    return np.stack([normalizer.transform_map(case.maps[k]) for k in combo], axis=1)


def predict_proba(nets, case, combo, unified, normalizer, batch_size=16):
    """Per-zone probabilities ``(3, nz, ny, nx)`` for one case."""
    x = _input_stack(case, combo, unified, normalizer)
    outs = []
    for net in nets:
        chunks = []
        for lo in range(0, x.shape[0], batch_size):
            logits, _ = forward_logits(net, x[lo : lo + batch_size])
            chunks.append(sigmoid(logits.value).transpose(0, 3, 1, 2))
        outs.append(np.concatenate(chunks))
    prob = np.concatenate(outs, axis=1)  # (nz, 3, ny, nx)
    return prob.transpose(1, 0, 2, 3)


def predict(params, case, combo_or_um, normalizer, combo=None, threshold=0.5, pz_wins=True):
    """Segment one case into a :class:`MaskSet`.

    ``combo_or_um`` is an input combination (IM) or ``"um"``; for the
    unified model ``combo`` selects which maps are fed (default all six
    would not be a canonical combination, so it must be given). Pixels are
    foreground when the probability is strictly above ``threshold``.
    """
    nets = params if isinstance(params, (list, tuple)) else [params]
    if isinstance(combo_or_um, str) and combo_or_um.lower() == "um":
        if combo is None:
            raise ConfigError("unified-model prediction needs the input combination to feed")
        combo, unified = validate_combo(combo), True
    else:
        combo, unified = validate_combo(combo_or_um), False
    prob = predict_proba(nets, case, combo, unified, normalizer)
    pg, cz, pz = repair_zones(*(prob > threshold), pz_wins=pz_wins)
    return MaskSet(pg, cz, pz, case.spacing_mm)


# --- estimator ---------------------------------------------------------------


class DenseUNetSegmenter(BaseEstimator):
    """Dense U-net zone segmenter with a scikit-learn style interface.

    ``fit`` takes a list of :class:`~zoneforge.core.CaseRecord` (with truth
    masks); ``predict`` returns one :class:`~zoneforge.core.MaskSet` per
    case.

    Parameters
    ----------
    regime : {"im", "um"}
        Individual model for ``combo`` or the unified six-slot model.
    combo : str
        Input combination, e.g. ``"mag"`` or ``"mag+sws+phi"``. For the
        unified model it is the default combination fed at prediction time.
    n_stages, growth, stem_channels, compression : network width/depth.
    learning_rate, momentum, decay, decay_mode, batch_size, epochs : SGD.
    per_zone : bool
        Train three single-output networks instead of one 3-channel network.
    random_state : int
        Seed of the deterministic stream used for init and shuffling.

    Attributes
    ----------
    params_ : list of NetworkParams
    normalizer_ : MapNormalizer
    log_ : TrainLog
    """

    def __init__(
        self,
        regime="im",
        combo="mag",
        n_stages=3,
        growth=8,
        stem_channels=16,
        compression=0.5,
        learning_rate=1e-3,
        momentum=0.9,
        decay=1e-6,
        decay_mode="lr",
        batch_size=25,
        epochs=1,
        per_zone=False,
        random_state=0,
    ):
        self.regime = regime
        self.combo = combo
        self.n_stages = n_stages
        self.growth = growth
        self.stem_channels = stem_channels
        self.compression = compression
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay = decay
        self.decay_mode = decay_mode
        self.batch_size = batch_size
        self.epochs = epochs
        self.per_zone = per_zone
        self.random_state = random_state

    def _regime(self):
        return Regime.um() if str(self.regime).lower() == "um" else Regime.im(self.combo)

    def _arch(self, regime, out_channels=3):
        return ArchConfig(
            in_channels=regime.in_channels,
            out_channels=out_channels,
            n_stages=self.n_stages,
            growth=self.growth,
            stem_channels=self.stem_channels,
            compression=self.compression,
        )

    def _opt(self):
        return OptimizerConfig(
            lr=self.learning_rate,
            momentum=self.momentum,
            decay=self.decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=int(self.random_state or 0),
            decay_mode=self.decay_mode,
        )

    def fit(self, cases, y=None, checkpoint_dir=None):
        cases = _as_cases(cases)
        regime = self._regime()
        opt = self._opt()
        rng = RngState(opt.seed)
        self.normalizer_ = MapNormalizer().fit(cases)
        samples = _assemble(regime, cases, self.normalizer_)
        if not samples:
            raise DataError("the assembled training set is empty")
        extra = dict(_header_extra(regime, self.normalizer_), estimator=self.get_params(), per_zone=self.per_zone)
        if self.per_zone:
            checkpoint_dir = None
        targets = [[0], [1], [2]] if self.per_zone else [None]
        self.params_ = []
        self.log_ = TrainLog()
        self.step_ = 0
        for channels in targets:
            init_rng, train_rng = rng.spawn(2)
            net = init_params(self._arch(regime, 1 if channels else 3), init_rng)
            net, log, self.step_ = _train_network(net, samples, opt, train_rng, channels, checkpoint_dir, extra)
            self.params_.append(net)
            for row in zip(log.epochs, log.mean_loss, log.wall_time):
                self.log_.append(*row)
        self.rng_ = rng
        self.regime_ = regime
        return self

    def predict(self, cases, combo=None):
        check_is_fitted(self, "params_")
        single = isinstance(cases, CaseRecord)
        cases = _as_cases(cases)
        regime = getattr(self, "regime_", None) or self._regime()
        if regime.kind == "um":
            chosen, unified = validate_combo(combo or self.combo), True
        else:
            chosen, unified = regime.combo, False
            if combo is not None and validate_combo(combo) != chosen:
                raise ConfigError(f"individual model for {chosen} cannot take {combo}")
        out = []
        for case in cases:
            prob = predict_proba(self.params_, case, chosen, unified, self.normalizer_)
            pg, cz, pz = repair_zones(*(prob > 0.5))
            out.append(MaskSet(pg, cz, pz, case.spacing_mm))
        return out[0] if single else out

    def predict_proba(self, case, combo=None):
        check_is_fitted(self, "params_")
        regime = getattr(self, "regime_", None) or self._regime()
        unified = regime.kind == "um"
        chosen = validate_combo(combo or self.combo) if unified else regime.combo
        return predict_proba(self.params_, case, chosen, unified, self.normalizer_)

    def score(self, cases, y=None):
        """Mean gland Dice over ``cases``."""
        from .evalkit import dice

        cases = _as_cases(cases)
        preds = self.predict(cases)
        return float(np.mean([dice(p.pg, c.truth.pg) for p, c in zip(preds, cases)]))

    # checkpoint round trip -------------------------------------------------

    def save(self, path, extra=None):
        """Write one checkpoint per network: ``path`` or ``path.<zone>``."""
        check_is_fitted(self, "params_")
        path = Path(path)
        header = dict(_header_extra(self.regime_, self.normalizer_), estimator=self.get_params(), per_zone=self.per_zone)
        if extra:
            header.update(extra)
        if len(self.params_) == 1:
            save_checkpoint(path, self.params_[0], self.step_, self.rng_, header)
        else:
            for zone, net in zip(ZONES, self.params_):
                save_checkpoint(path.with_name(f"{path.name}.{zone}"), net, self.step_, self.rng_, header)

    @classmethod
    def load(cls, path):
        path = Path(path)
        paths = [path] if path.exists() else [path.with_name(f"{path.name}.{z}") for z in ZONES]
        nets, header = [], None
        for p in paths:
            net, header = load_checkpoint(p)
            nets.append(net)
        extra = header.get("extra", {})
        est = cls(**extra.get("estimator", {}))
        est.params_ = nets
        est.normalizer_ = MapNormalizer.from_stats(
            extra["normalization"]["stats"], extra["normalization"].get("case_ids", ())
        )
        est.regime_ = Regime.um() if extra.get("regime") == "um" else Regime.im(extra["combo"])
        est.step_ = header.get("step", 0)
        est.rng_ = RngState.from_state(header["rng"]) if header.get("rng") else RngState(0)
        est.log_ = TrainLog()
        return est


def _as_cases(cases):
    if isinstance(cases, CaseRecord):
        return [cases]
    return list(cases)
