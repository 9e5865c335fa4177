"""Command-line entry point: the full pipeline as subcommands.

All randomness is governed by a single seed (config ``seed`` or ``--seed``);
two runs with the same config and seed produce identical checkpoints,
translations, and metric logs. ``DUALATTN_LOG=debug|info|quiet`` sets log
verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as C
from . import data as D
from . import evaluation, synthetic, visualize
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import greedy_decode, init_params
from .training import TrainingDiverged, train

log = logging.getLogger("dualattn")


class CliError(ValueError):
    pass


def build_parser():
    p = argparse.ArgumentParser(prog="dualattn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate the disambiguation task")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--n-objects", type=int, default=8)
    g.add_argument("--grid-len", type=int, default=8)
    g.add_argument("--d-feat", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.1)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--data-dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--model", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="greedy-decode a source file or stdin")
    tr.add_argument("--model", required=True)
    tr.add_argument("--src")
    tr.add_argument("--features")
    tr.add_argument("--out")
    tr.set_defaults(func=cmd_translate)

    b = sub.add_parser("eval-bleu", help="corpus BLEU4 of hypothesis vs reference file")
    b.add_argument("--hyp", required=True)
    b.add_argument("--ref", required=True)
    b.set_defaults(func=cmd_eval_bleu)

    pp = sub.add_parser("eval-ppl", help="teacher-forced perplexity on a corpus")
    pp.add_argument("--model", required=True)
    pp.add_argument("--tgt", required=True)
    pp.add_argument("--src")
    pp.add_argument("--features")
    pp.set_defaults(func=cmd_eval_ppl)

    e = sub.add_parser("export-attention", help="dump attention weights and heatmaps")
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--src")
    e.add_argument("--features")
    e.add_argument("--line", type=int, default=0, help="corpus line to export")
    e.add_argument("--layer", type=int)
    e.add_argument("--head", type=int)
    e.set_defaults(func=cmd_export_attention)

    i = sub.add_parser("inspect-features", help="header and stats of a VFEA file")
    i.add_argument("--features", required=True)
    i.set_defaults(func=cmd_inspect_features)
    return p


# ---------------------------------------------------------------------------


def cmd_gen_synthetic(args):
    task = synthetic.generate_synthetic_task(
        seed=args.seed,
        n_train=args.n_train,
        n_test=args.n_test,
        n_objects=args.n_objects,
        grid_len=args.grid_len,
        d_feat=args.d_feat,
        noise=args.noise,
    )
    os.makedirs(args.out, exist_ok=True)
    synthetic.write_split(task.train, os.path.join(args.out, "train"))
    synthetic.write_split(task.test, os.path.join(args.out, "test"))
    # text-only view of the same corpus, for pretraining runs
    for split, n in (("train", args.n_train), ("test", args.n_test)):
        D.write_manifest(
            os.path.join(args.out, f"{split}.text.manifest"),
            [("text_pair", None)] * n,
        )
    print(
        f"wrote {args.n_train} train / {args.n_test} test instances "
        f"({args.n_objects} objects, grid {args.grid_len}x{args.d_feat}) to {args.out}"
    )
    return 0


def _load_vocabs(model_path):
    mdir = os.path.dirname(os.path.abspath(model_path))
    sp, tp = os.path.join(mdir, "vocab.src.txt"), os.path.join(mdir, "vocab.tgt.txt")
    if not (os.path.exists(sp) and os.path.exists(tp)):
        raise CliError(f"vocab files not found next to {model_path}")
    return D.Vocabulary.load(sp), D.Vocabulary.load(tp)


def cmd_train(args):
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "data_dir": args.data_dir,
        "epochs": args.epochs,
        "init_model": args.model,
    }
    rc = C.load_run_config(args.config, overrides)
    if not rc.train_src or not rc.train_tgt:
        raise C.ConfigError("config must set train_src and train_tgt")

    src_vocab = D.build_vocab(_lines(rc.train_src), rc.min_count)
    tgt_vocab = D.build_vocab(_lines(rc.train_tgt), rc.min_count)
    features = D.load_visual_features(rc.train_features) if rc.train_features else None
    instances = D.load_dataset(
        rc.train_tgt,
        tgt_vocab,
        src_path=rc.train_src,
        src_vocab=src_vocab,
        manifest_path=rc.train_manifest or None,
        features=features,
        max_len=rc.max_len,
    )
    val_instances = val_features = None
    if rc.val_src and rc.val_tgt:
        val_features = D.load_visual_features(rc.val_features) if rc.val_features else None
        val_instances = D.load_dataset(
            rc.val_tgt,
            tgt_vocab,
            src_path=rc.val_src,
            src_vocab=src_vocab,
            manifest_path=rc.val_manifest or None,
            features=val_features,
            max_len=rc.max_len,
        )

    if rc.init_model:
        cfg, params = load_checkpoint(rc.init_model)
        if (cfg.src_vocab, cfg.tgt_vocab) != (len(src_vocab), len(tgt_vocab)):
            raise C.ConfigError(
                f"checkpoint vocabularies {cfg.src_vocab}/{cfg.tgt_vocab} do not "
                f"match this corpus ({len(src_vocab)}/{len(tgt_vocab)})"
            )
        log.info("continuing from %s", rc.init_model)
    else:
        cfg = C.model_config(rc, len(src_vocab), len(tgt_vocab), features)
        params = init_params(cfg, rc.seed)
    tc = C.train_config(rc)

    os.makedirs(rc.out_dir, exist_ok=True)
    src_vocab.save(os.path.join(rc.out_dir, "vocab.src.txt"))
    tgt_vocab.save(os.path.join(rc.out_dir, "vocab.tgt.txt"))
    result = train(
        cfg, params, instances, tc,
        features=features,
        val_instances=val_instances,
        val_features=val_features,
        out_dir=rc.out_dir,
    )
    save_checkpoint(os.path.join(rc.out_dir, "model.dat"), cfg, result.best_params)
    metric = "" if result.best_metric is None else f", best {tc.selection_metric} {result.best_metric:.4f}"
    print(f"trained {result.steps} steps on {len(instances)} instances{metric}; "
          f"model at {os.path.join(rc.out_dir, 'model.dat')}")
    return 0


def _lines(path):
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def _iter_sources(args, cfg, src_vocab):
    """Yields (src_ids or None, grid or None) per input line/grid."""
    features = D.load_visual_features(args.features) if args.features else None
    if args.src:
        lines = _lines(args.src)
    elif sys.stdin.isatty() or features is not None:
        lines = None
    else:
        lines = [line.rstrip("\n") for line in sys.stdin]
    if lines is None and features is None:
        raise CliError("need --src and/or --features")
    n = len(lines) if lines is not None else len(features)
    if lines is not None and features is not None and len(features) != len(lines):
        raise CliError(
            f"{len(lines)} source lines but {len(features)} feature grids"
        )
    for i in range(n):
        ids = None
        if lines is not None:
            ids = D.encode(lines[i], src_vocab, max_len=cfg.max_len, too_long="truncate")
            if not ids:
                ids = [D.UNK_ID]
        grid = features.grids[i] if features is not None else None
        yield ids, grid


def cmd_translate(args):
    cfg, params = load_checkpoint(args.model)
    src_vocab, tgt_vocab = _load_vocabs(args.model)
    out_f = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for ids, grid in _iter_sources(args, cfg, src_vocab):
            tokens, _ = greedy_decode(params, cfg, src_ids=ids, grid=grid, max_len=cfg.max_len)
            out_f.write(D.decode(tokens, tgt_vocab) + "\n")
    finally:
        if args.out:
            out_f.close()
    return 0


def cmd_eval_bleu(args):
    hyps = [line.split() for line in _lines(args.hyp)]
    refs = [line.split() for line in _lines(args.ref)]
    report = evaluation.bleu4(hyps, refs)
    print(f"BLEU4 = {report.bleu4:.4f}")
    print(
        "p1-p4 = " + " ".join(f"{p:.4f}" for p in report.precisions)
        + f"  BP = {report.brevity_penalty:.4f}"
        + f"  lengths = {report.hyp_len}/{report.ref_len}"
    )
    return 0


def cmd_eval_ppl(args):
    cfg, params = load_checkpoint(args.model)
    src_vocab, tgt_vocab = _load_vocabs(args.model)
    features = D.load_visual_features(args.features) if args.features else None
    instances = D.load_dataset(
        args.tgt,
        tgt_vocab,
        src_path=args.src,
        src_vocab=src_vocab,
        features=features,
        max_len=cfg.max_len,
    )
    value = evaluation.perplexity(cfg, params, instances, features)
    print(f"perplexity = {value:.4f}")
    return 0


def cmd_export_attention(args):
    cfg, params = load_checkpoint(args.model)
    src_vocab, tgt_vocab = _load_vocabs(args.model)
    pairs = list(_iter_sources(args, cfg, src_vocab))
    if not 0 <= args.line < len(pairs):
        raise CliError(f"--line {args.line} outside 0..{len(pairs) - 1}")
    ids, grid = pairs[args.line]
    src_tokens = [src_vocab.token_of(i) for i in ids] if ids is not None else []
    dump, paths = visualize.export_attention(
        cfg,
        params,
        args.out,
        src_ids=ids,
        grid=grid,
        src_tokens=src_tokens,
        tgt_vocab=tgt_vocab,
        layer=args.layer,
        head=args.head,
        instance_id=str(args.line),
        max_len=cfg.max_len,
    )
    print(f"wrote {len(paths)} files to {args.out} "
          f"({len(dump.records)} records, {len(dump.gen_tokens)} generated tokens)")
    return 0


def cmd_inspect_features(args):
    fs = D.load_visual_features(args.features)
    print(f"VFEA version 1: {len(fs)} grids of {fs.grid_len} x {fs.d_feat}")
    if len(fs):
        g = fs.grids
        print(f"min {g.min():.6g}  max {g.max():.6g}  mean {g.mean():.6g}")
    return 0


# ---------------------------------------------------------------------------


def dispatch(argv) -> int:
    level = {"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.ERROR}.get(
        os.environ.get("DUALATTN_LOG", "").lower(), logging.WARNING
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, CheckpointError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
