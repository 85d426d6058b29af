"""Command-line front end: ``zoneforge <subcommand> [options]``.

Every subcommand writes a ``run.json`` provenance record into its output
directory. Exit codes are 0 on success, 1 on a domain error (message on
stderr) and 2 on a usage error.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from contextlib import ExitStack
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_json, phantom_config, prep_config, train_config
from .core import MapKind, validate_combo
from .errors import ZoneforgeError
from .evalkit import (
    aggregate,
    evaluate_case,
    render_markdown,
    summary_header,
    summary_row,
    tabulate,
    tabulation_header,
    tabulation_rows,
    write_metrics_csv,
    write_summary_csv,
    write_tabulation_csv,
)
from .io import load_dataset, read_manifest, read_mask, write_dataset, write_manifest, write_mask
from .phantom import generate_cases
from .prep import ElasticAugmenter, preprocess_case
from .rng import RngState
from .trainer import DenseUNetSegmenter

logger = logging.getLogger("zoneforge")

PRED_INDEX = "predictions.json"


# --- provenance --------------------------------------------------------------


def _config_hash(args):
    """SHA-256 over the config file bytes plus the resolved arguments."""
    h = hashlib.sha256()
    path = getattr(args, "config", None)
    if path:
        h.update(Path(path).read_bytes())
    resolved = {k: str(v) for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    h.update(json.dumps(resolved, sort_keys=True).encode())
    return h.hexdigest()


def _versions():
    import numba
    import scipy
    import sklearn

    return {
        "zoneforge": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "numba": numba.__version__,
    }


def _write_run(out, args, wall, threads):
    record = {
        "subcommand": args.command,
        "config": str(args.config) if getattr(args, "config", None) else None,
        "config_hash": _config_hash(args),
        "seed": getattr(args, "seed", None),
        "deterministic": bool(args.deterministic),
        "threads": threads,
        "versions": _versions(),
        "wall_time_s": round(wall, 3),
    }
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _provenance(args, **extra):
    return dict({"tool": f"zoneforge {args.command}", "seed": getattr(args, "seed", None)}, **extra)


# --- subcommands -------------------------------------------------------------


def cmd_phantom(args):
    data = load_json(args.config)
    seed = args.seed if args.seed is not None else data.get("seed", 0)
    data["seed"] = seed
    cfg = phantom_config(data)
    cases = generate_cases(cfg, args.count, seed=seed, prefix=args.prefix)
    write_dataset(cases, args.out, _provenance(args), {"phantom": cfg.to_dict()})
    logger.info("wrote %d phantoms to %s", len(cases), args.out)
    return args.out


def cmd_prep(args):
    prep, _, _ = prep_config(load_json(args.config))
    cases = [preprocess_case(c, prep) for c in load_dataset(args.data)]
    write_dataset(cases, args.out, _provenance(args))
    logger.info("preprocessed %d cases into %s", len(cases), args.out)
    return args.out


def cmd_augment(args):
    _, elastic, seed = prep_config(load_json(args.config))
    if args.seed is not None:
        seed = args.seed
    if args.n_augment is not None:
        elastic = type(elastic)(elastic.alpha, elastic.sigma, args.n_augment)
    cases = load_dataset(args.data)
    train = [c for c in cases if c.split_tag == "train"]
    rest = [c for c in cases if c.split_tag != "train"]
    aug = ElasticAugmenter(elastic.alpha, elastic.sigma, elastic.n_augment, random_state=seed)
    out = aug.fit_transform(train) + rest
    write_dataset(out, args.out, _provenance(args, seed=seed))
    logger.info("augmented %d training cases to %d", len(train), len(out) - len(rest))
    return args.out


def cmd_split(args):
    manifest = read_manifest(args.data)
    entries = manifest["cases"]
    n = len(entries)
    n_train = args.n_train if args.n_train is not None else int(round(n * args.ratio))
    if not 0 <= n_train <= n:
        raise ZoneforgeError(f"cannot put {n_train} of {n} cases into the training split")
    order = RngState(args.seed).permutation(n)
    train = {int(i) for i in order[:n_train]}
    for i, entry in enumerate(entries):
        entry["split"] = "train" if i in train else "test"
    manifest["split"] = {"seed": args.seed, "n_train": n_train, "n_test": n - n_train}
    write_manifest(args.data, manifest)
    logger.info("split %d cases: %d train / %d test", n, n_train, n - n_train)
    return args.data


def cmd_train(args):
    data = load_json(args.config)
    for key in ("regime", "combo", "seed", "epochs"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    kwargs, _ = train_config(data)
    cases = load_dataset(args.data, split="train")
    if not cases:
        raise ZoneforgeError(f"{args.data} has no training cases")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    est = DenseUNetSegmenter(**kwargs).fit(cases, checkpoint_dir=out)
    est.save(out / "final.ckpt", extra={"seed": kwargs["random_state"]})
    est.log_.write_csv(out / "train_log.csv")
    logger.info("trained %s model for %d epochs", est.regime_.kind, kwargs["epochs"])
    return out


def _load_model(path):
    path = Path(path)
    return DenseUNetSegmenter.load(path / "final.ckpt" if path.is_dir() else path)


def _label(est, combo):
    if est.regime_.kind == "um":
        return f"UM ({validate_combo(combo or est.combo).name})"
    return f"IM ({est.regime_.combo.name})"


def cmd_predict(args):
    est = _load_model(args.model)
    cases = load_dataset(args.data, split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = {"model": str(args.model), "combo": args.combo, "cases": {}}
    for case, mask in zip(cases, est.predict(cases, combo=args.combo)):
        name = f"{case.case_id}.mmask"
        write_mask(mask, out / name, _provenance(args, model=str(args.model)))
        index["cases"][case.case_id] = name
    with open(out / PRED_INDEX, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("wrote %d predicted masks to %s", len(cases), out)
    return out


def cmd_eval(args):
    est = _load_model(args.model)
    cases = load_dataset(args.data, split=args.split)
    if not cases:
        raise ZoneforgeError(f"{args.data} has no cases in split {args.split!r}")
    model_dir = Path(args.model) if Path(args.model).is_dir() else Path(args.model).parent
    out = Path(args.out) if args.out else model_dir / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for case, mask in zip(cases, est.predict(cases, combo=args.combo)):
        rows.extend(evaluate_case(mask, case.truth, case.case_id))
    agg = aggregate(rows)
    label = _label(est, args.combo)
    write_metrics_csv(out / "metrics.csv", rows)
    write_summary_csv(out / "summary.csv", [(label, agg)])
    (out / "summary.md").write_text(render_markdown(summary_header(), [summary_row(label, agg)]), encoding="utf-8")
    logger.info("%s: PG Dice %.4f", label, agg["PG"]["dice"]["mean"])
    return out


def _load_predictions(pred_dir, cases):
    pred_dir = Path(pred_dir)
    try:
        with open(pred_dir / PRED_INDEX, encoding="utf-8") as fh:
            index = json.load(fh)["cases"]
    except FileNotFoundError:
        raise ZoneforgeError(f"no {PRED_INDEX} in {pred_dir}") from None
    missing = [c.case_id for c in cases if c.case_id not in index]
    if missing:
        raise ZoneforgeError(f"no prediction for case(s) {', '.join(missing)}")
    return [read_mask(pred_dir / index[c.case_id]) for c in cases]


def cmd_tabulate(args):
    cases = load_dataset(args.data, split=args.split)
    if args.pred:
        preds = _load_predictions(args.pred, cases)
    elif args.model:
        preds = _load_model(args.model).predict(cases, combo=args.combo)
    else:
        preds = [c.truth for c in cases]
    tab = tabulate(cases, [c.truth for c in cases], preds, paired=args.paired)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tabulation_csv(out / "tabulation.csv", tab)
    md = render_markdown(tabulation_header(), tabulation_rows(tab))
    (out / "tabulation.md").write_text(md, encoding="utf-8")
    return out


def cmd_overlay(args):
    from .render import overlay

    cases = load_dataset(args.data, split=args.split)
    if args.case:
        cases = [c for c in cases if c.case_id in set(args.case)]
        if not cases:
            raise ZoneforgeError(f"no case named {', '.join(args.case)}")
    masks = _load_predictions(args.pred, cases) if args.pred else [c.truth for c in cases]
    n = 0
    for case, mask in zip(cases, masks):
        n += len(overlay(case, mask, args.out, kind=args.kind, scale=args.scale))
    logger.info("wrote %d overlay images to %s", n, args.out)
    return args.out


# --- argument parsing --------------------------------------------------------


def _common(p, data=True, out=True, seed=False, config=False):
    if config:
        p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    if data:
        p.add_argument("--data", required=True, help="dataset directory holding manifest.json")
    if out:
        p.add_argument("--out", required=True, help="output directory (created if absent)")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="seed of the deterministic stream")


def build_parser():
    parser = argparse.ArgumentParser(prog="zoneforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"zoneforge {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded reproducible mode")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="BLAS worker threads (default: $ZONEFORGE_THREADS)",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic phantom cases")
    _common(p, data=False, seed=True, config=True)
    p.add_argument("--count", type=int, default=25)
    p.add_argument("--prefix", default="case")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("prep", help="resample and center-crop a dataset")
    _common(p, config=True)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("augment", help="add elastic deformations of the training cases")
    _common(p, seed=True, config=True)
    p.add_argument("--n-augment", type=int, default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", help="assign train/test split tags in place")
    _common(p, out=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratio", type=float, default=30 / 40, help="training fraction (default 0.75)")
    p.add_argument("--n-train", type=int, default=None, help="exact number of training cases")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a Dense U-net on the training split")
    _common(p, seed=True, config=True)
    p.add_argument("--regime", choices=("im", "um"), default=None)
    p.add_argument("--combo", default=None, help="input combination, e.g. mag or mag+sws")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("predict", cmd_predict, "write predicted masks"),
        ("eval", cmd_eval, "score predictions against ground truth"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True, help="run directory or checkpoint path")
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--combo", default=None, help="input combination for a unified model")
        p.add_argument("--out", required=(name == "predict"), default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("tabulate", help="zonal SWS/mag/phi statistics under true and predicted masks")
    _common(p)
    p.add_argument("--split", default="test")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--pred", help="directory written by the predict subcommand")
    src.add_argument("--model", help="predict on the fly with this model")
    p.add_argument("--combo", default=None)
    p.add_argument("--paired", action="store_true", help="paired test on per-case means")
    p.set_defaults(func=cmd_tabulate)

    p = sub.add_parser("overlay", help="render mask contours over a map as PNGs")
    _common(p)
    p.add_argument("--split", default=None)
    p.add_argument("--case", action="append", help="case id (repeatable; default all)")
    p.add_argument("--pred", help="directory written by predict (default: truth masks)")
    p.add_argument("--kind", default="mag", choices=[k.value for k in MapKind])
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_overlay)
    return parser


def _thread_count(args):
    if args.deterministic:
        return 1
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("ZONEFORGE_THREADS")
    return max(1, int(env)) if env and env.isdigit() else None


def dispatch(argv=None):
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    threads = _thread_count(args)
    start = time.perf_counter()
    try:
        with ExitStack() as stack:
            if threads is not None:
                from threadpoolctl import threadpool_limits

                stack.enter_context(threadpool_limits(limits=threads))
            out = args.func(args)
        _write_run(out, args, time.perf_counter() - start, threads)
    except ZoneforgeError as exc:
        print(f"zoneforge {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"zoneforge {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
