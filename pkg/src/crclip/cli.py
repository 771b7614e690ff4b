"""
Command-line entry point.

Exit codes: 0 success, 1 failed validation (gradcheck/selfcheck) or a
non-finite training loss, 2 usage or configuration error, 3 IO or
corrupted-file error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .errors import CRClipError, NonFiniteError
from .formats import (FormatError, load_checkpoint, read_dataset, read_json, read_matrix,
                      write_dataset, write_matrix)
from .metrics import evaluate, format_report_block, format_report_tsv
from .synthdata import Geometry, generate, split
from .tta import DEFAULT_SCALES, TtaConfig

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("crclip")


def _scales(text: str):
    try:
        values = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from None
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("scales must be positive numbers")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crclip", description=__doc__.strip().splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, default=256)
    g.add_argument("--verbs", type=int, default=4)
    g.add_argument("--nouns", type=int, default=6)
    g.add_argument("--caption-length", type=int, default=6)
    g.add_argument("--noise", type=float, default=0.05)

    t = sub.add_parser("train", help="train a model and write checkpoint + log")
    t.add_argument("--config", help="TrainConfig JSON (defaults if omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--no-figures", action="store_true", help="skip loss-curve figure")

    for name, help_text in (("eval", "evaluate retrieval on a dataset split"),
                            ("tta-eval", "evaluate with test-time augmentation")):
        e = sub.add_parser(name, help=help_text)
        e.add_argument("--checkpoint")
        e.add_argument("--data")
        e.add_argument("--config", help="run config (default: config.json beside the checkpoint)")
        e.add_argument("--threshold", type=float, default=0.0)
        e.add_argument("--split", choices=("test", "train", "all"), default="test")
        e.add_argument("--figures", help="directory for report figures")
        if name == "eval":
            e.add_argument("--pairing", choices=("paired", "all_pairs"), default="paired")
            e.add_argument("--embeddings-out", help="write visual/text embedding matrices here")
            e.add_argument("--visual", help="visual embedding matrix file")
            e.add_argument("--text", help="text embedding matrix file")
            e.add_argument("--relevance", help="relevance matrix file")
        else:
            e.add_argument("--flip", action="store_true")
            e.add_argument("--scales", type=_scales, default=DEFAULT_SCALES)
            e.add_argument("--pool", choices=("embedding", "feature"), default="embedding")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--cases", type=int, default=5)

    sc = sub.add_parser("selfcheck", help="metric oracles and IO round-trips")
    sc.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = generate(args.seed, args.samples, args.verbs, args.nouns, Geometry(),
                  args.caption_length, args.noise)
    out = write_dataset(args.out, ds)
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plots import plot_training_curve
    from .trainer import TrainConfig, save_run, train

    cfg = TrainConfig.from_dict(read_json(args.config)) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    ds = read_dataset(args.data)
    mcfg = cfg.model_config(ds)
    params, history = train(cfg, ds, on_epoch=lambda r: print(r.line(), flush=True))
    out = save_run(args.out, params, cfg, history, mcfg)
    if history.records and not args.no_figures:
        plot_training_curve(history, out / "loss.png")
    print(f"checkpoint written to {out / 'checkpoint.crck'}")
    return EXIT_OK


def _load_model(args):
    from .model import init_model, load_state
    from .trainer import TrainConfig

    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.with_name("config.json")
    cfg = TrainConfig.from_dict(read_json(cfg_path))
    mcfg = cfg.model_config()
    params = load_state(init_model(mcfg, cfg.seed), load_checkpoint(ckpt))
    return cfg, mcfg, params


def _select(ds, cfg, which: str):
    if which == "all":
        return ds
    train_ds, test_ds = split(ds, cfg.train_fraction, cfg.seed)
    return test_ds if which == "test" else train_ds


def _print_report(report) -> None:
    print(format_report_tsv(report))
    print(format_report_block(report))


def _figures(directory, S, C, report, label: str) -> None:
    from .plots import plot_reports, plot_similarity

    d = Path(directory)
    plot_similarity(S, C, d / f"{label}_similarity.png")
    plot_reports({label: report}, d / f"{label}_metrics.png")


def cmd_eval(args, parser) -> int:
    from .model import encode_dataset, score_matrix

    if args.visual or args.text or args.relevance:
        if not (args.visual and args.text and args.relevance):
            parser.error("--visual, --text and --relevance must be given together")
        V, Tx, C = read_matrix(args.visual), read_matrix(args.text), read_matrix(args.relevance)
        S = V @ Tx.T
    else:
        if not (args.checkpoint and args.data):
            parser.error("eval needs --checkpoint and --data (or --visual/--text/--relevance)")
        cfg, mcfg, params = _load_model(args)
        ds = _select(read_dataset(args.data), cfg, args.split)
        f_v, f_t = encode_dataset(params, ds.clips, ds.captions)
        S = score_matrix(params, mcfg, f_v, f_t, args.pairing)
        C = ds.relevance
        if args.embeddings_out:
            from .model import embed_features
            from . import tensor as T

            with T.no_grad():
                v, t = embed_features(params, mcfg, f_v, f_t)
            out = Path(args.embeddings_out)
            out.mkdir(parents=True, exist_ok=True)
            write_matrix(out / "visual.crmx", v.data)
            write_matrix(out / "text.crmx", t.data)
            write_matrix(out / "relevance.crmx", C)
    report = evaluate(S, C, args.threshold)
    _print_report(report)
    if args.figures:
        _figures(args.figures, S, C, report, "eval")
    return EXIT_OK


def cmd_tta_eval(args, parser) -> int:
    from .model import tta_embed_dataset

    if not (args.checkpoint and args.data):
        parser.error("tta-eval needs --checkpoint and --data")
    cfg, mcfg, params = _load_model(args)
    ds = _select(read_dataset(args.data), cfg, args.split)
    tta = TtaConfig(enable_flip=args.flip, scales=args.scales, pool=args.pool)
    v, t = tta_embed_dataset(params, mcfg, ds.clips, ds.captions, tta)
    S = v @ t.T
    report = evaluate(S, ds.relevance, args.threshold)
    print(f"# variants: {tta.n_variants} (flip={tta.enable_flip}, scales={list(tta.scales)})")
    _print_report(report)
    if args.figures:
        _figures(args.figures, S, ds.relevance, report, "tta")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(cases=args.cases, seed=args.seed)
    for r in results.values():
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}\t{r.name}\tcases={r.cases}\tmax_rel_err={r.max_rel_err:.3e}\t"
              f"tol={r.tol:g}")
    return EXIT_OK if all(r.passed for r in results.values()) else EXIT_FAILED


def cmd_selfcheck(args) -> int:
    from .checks import run_selfcheck

    results = run_selfcheck(args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "gen-data": lambda: cmd_gen_data(args),
        "train": lambda: cmd_train(args),
        "eval": lambda: cmd_eval(args, parser),
        "tta-eval": lambda: cmd_tta_eval(args, parser),
        "gradcheck": lambda: cmd_gradcheck(args),
        "selfcheck": lambda: cmd_selfcheck(args),
    }
    try:
        return handlers[args.command]()
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except CRClipError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())
