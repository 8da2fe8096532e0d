"""Command-line entry point: ``pocketdex <command> ...``.

Exit status is 0 on success, 1 when the inputs are rejected (message on
stderr) and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PocketdexError
from .io_utils import atomic_write_text

log = logging.getLogger("pocketdex")


def _cores() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _header(args: argparse.Namespace) -> str:
    skip = {"func", "verbose", "_parser"}
    parts = [f"{k.replace('_', '-')}={v}" for k, v in sorted(vars(args).items()) if k not in skip and v is not None]
    return f"pocketdex {__version__} " + " ".join(parts)


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


# -- index -------------------------------------------------
def _read_vectors(path: Path, ids_path: Path | None):
    if path.suffix == ".npy":
        vecs = np.load(path)
        if ids_path is None:
            raise ValueError("--ids is required with a .npy input")
        ids = [ln.strip() for ln in ids_path.read_text().splitlines() if ln.strip()]
        return vecs, ids
    ids, rows = [], []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if fields[0].lower() == "id" and not ids:
            continue  # header
        try:
            rows.append([float(x) for x in fields[1:]])
        except ValueError:
            raise ValueError(f"{path}:{n}: non-numeric vector component") from None
        ids.append(fields[0])
    if len({len(r) for r in rows}) > 1:
        from .errors import DimensionMismatchError

        raise DimensionMismatchError(f"{path}: rows have different dimensions")
    return np.array(rows), ids


def cmd_index_build(args) -> int:
    from .retrieval import build_index

    vecs, ids = _read_vectors(Path(args.input), Path(args.ids) if args.ids else None)
    index = build_index(vecs, ids, args.metric, args.out)
    print(f"wrote {args.out}: {index.count} vectors, dim {index.dim}, {index.metric.name.lower()}")
    return 0


def cmd_index_info(args) -> int:
    from .retrieval import load_index

    index = load_index(args.index)
    print(f"dim: {index.dim}")
    print(f"count: {index.count}")
    print(f"metric: {index.metric.name.lower()}")
    return 0


# -- encoding and search -------------------------------------------------
def cmd_embed(args) -> int:
    from .chemio import read_structure, tokenize
    from .encoder import encode_batch, load_checkpoint
    from .retrieval import build_index

    stems = [Path(f).stem for f in args.inputs]
    dup = sorted({s for s in stems if stems.count(s) > 1})
    if dup:
        raise ValueError(f"duplicate file stems would give duplicate ids: {', '.join(dup)}")
    model = load_checkpoint(args.checkpoint)
    entities = [tokenize(read_structure(f)) for f in args.inputs]
    vecs = encode_batch(entities, model.tower(args.tower))
    index = build_index(vecs, stems, args.metric, args.out)
    print(f"wrote {args.out}: {index.count} {args.tower} embeddings, dim {index.dim}")
    return 0


def cmd_screen(args) -> int:
    from .retrieval import fish, load_index, screen

    index = load_index(args.index)
    if args.metric and index.metric.name.lower() != args.metric:
        raise ValueError(f"--metric {args.metric} but the index was built with {index.metric.name.lower()}")
    if args.command == "screen":
        result = screen(args.pocket, args.checkpoint, index, args.k, args.threads)
    else:
        result = fish(args.molecule, args.checkpoint, index, args.k, args.threads)
    _write(args.out, result.to_csv(_header(args)))
    return 0


# -- training -------------------------------------------------
def cmd_train(args) -> int:
    from .encoder import EncoderConfig, save_checkpoint
    from .synthetic import random_dataset
    from .trainer import fit, format_train_config, history_csv, parse_train_config, read_pair_manifest

    text = Path(args.config).read_text() if args.config else ""
    cfg = parse_train_config(text, seed=args.seed, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    if args.pairs:
        data = read_pair_manifest(args.pairs)
    elif args.synthetic:
        data = random_dataset(args.synthetic, cfg.seed)
    else:
        raise ValueError("give --pairs MANIFEST or --synthetic N")
    validation = read_pair_manifest(args.validation) if args.validation else None
    enc = EncoderConfig(**json.loads(args.encoder)) if args.encoder else EncoderConfig()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def report(row):
        extra = f" val_bedroc {row['val_bedroc']:.4f}" if "val_bedroc" in row else ""
        log.info("epoch %d loss %.5f%s", row["epoch"], row["total"], extra)

    result = fit(data, cfg, validation, config=enc, on_epoch=report)
    save_checkpoint(result.model, out / "model.dcmp")
    atomic_write_text(out / "history.csv", history_csv(result.history, _header(args)))
    atomic_write_text(out / "train_config.txt", f"# {_header(args)}\n" + format_train_config(cfg))
    final = result.history[-1]["total"] if result.history else float("nan")
    print(f"trained {len(result.history)} epochs, final loss {final:.5f}, kept epoch {result.best_epoch}; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import MetricParams, accuracy_at_k, evaluate, read_scores_labels

    lines = [f"# {_header(args)}", "metric,value"]
    if args.ranks:
        ranks = []
        for line in Path(args.ranks).read_text().splitlines():
            field = line.split(",")[-1].strip()
            if field and not line.startswith("#") and field.lower() != "rank":
                ranks.append(int(field))
        for k in args.k:
            lines.append(f"accuracy@{k},{accuracy_at_k(ranks, k):.6f}")
    else:
        if not (args.scores and args.labels):
            raise ValueError("give --scores and --labels, or --ranks")
        d = read_scores_labels(Path(args.scores).read_text(), Path(args.labels).read_text())
        for name, value in evaluate(d, MetricParams(alpha=args.alpha, ef_fractions=tuple(args.ef), re_fprs=tuple(args.re))).items():
            lines.append(f"{name},{value:.6f}")
    _write(args.out, "\n".join(lines) + "\n")
    return 0


# -- augmentation -------------------------------------------------
def cmd_augment(args) -> int:
    from .augment import HomologCandidate, pocket_residues, process_candidate, read_correspondence
    from .chemio import format_atoms_table, read_structure

    if len(args.homolog) != len(args.map):
        raise ValueError("give one --map per --homolog")
    original = read_structure(args.original)
    ligand = read_structure(args.ligand)
    pocket = pocket_residues(original, ligand)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for hpath, mpath in zip(args.homolog, args.map):
        cand = HomologCandidate(
            read_structure(hpath), original, read_correspondence(Path(mpath).read_text()), pocket, Path(hpath).stem
        )
        record, pair = process_candidate(cand, ligand)
        if pair is not None:
            name = f"{cand.name}_pocket.csv"
            atomic_write_text(out / name, format_atoms_table(pair.pocket))
            record["pocket_file"] = name
        records.append(record)
    atomic_write_text(out / "provenance.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    accepted = sum(r["status"] == "accepted" for r in records)
    print(f"{accepted}/{len(records)} candidates accepted; log in {out / 'provenance.jsonl'}")
    return 0


# -- diagnostics -------------------------------------------------
def cmd_bench(args) -> int:
    from .retrieval import random_index, throughput_bench

    index = random_index(args.count, args.dim, args.metric, args.seed)
    lines = [f"# {_header(args)}", "threads,queries,seconds,queries_per_sec,dots_per_sec,dots_per_sec_per_thread"]
    for t in args.threads_list:
        r = throughput_bench(index, args.queries, args.k, t, args.seed)
        lines.append(f"{t},{r.n_queries},{r.seconds:.4f},{r.queries_per_sec:.4f},{r.dots_per_sec:.4e},{r.per_thread_dots_per_sec:.4e}")
    _write(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    from .encoder import DualEncoder, EncoderConfig, load_checkpoint
    from .synthetic import random_dataset
    from .trainer import COMPONENTS, TrainConfig, gradient_check

    model = load_checkpoint(args.checkpoint) if args.checkpoint else DualEncoder.initialize(EncoderConfig(), args.seed)
    data = random_dataset(args.batch, args.seed)
    batch = [data[i] for i in range(len(data))]
    cfg = TrainConfig(topk_weight=1.0, masked_weight=1.0, denoise_weight=1.0, seed=args.seed)
    comps = COMPONENTS if args.component == "all" else (args.component,)
    worst = 0.0
    for c in comps:
        err = gradient_check(model, batch, cfg, args.eps, args.sample, c, args.seed)
        worst = max(worst, err)
        print(f"{c}: max relative error {err:.3e} over {args.sample} parameters")
    if worst > args.tolerance:
        print(f"error: gradient check exceeded tolerance {args.tolerance:g}", file=sys.stderr)
        return 1
    return 0


def cmd_selftest(args) -> int:
    from .acceptance import CHECKS, SLOW, run

    numbers = sorted(CHECKS) if args.full else [n for n in sorted(CHECKS) if n not in SLOW]
    results = run(numbers)
    for r in results:
        print(r.line())
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# -- parser -------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(2, f"\n{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pocketdex", description="Pocket and molecule embedding, virtual screening and target fishing.")
    p.add_argument("--version", action="version", version=f"pocketdex {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    idx = sub.add_parser("index", help="build or inspect an embedding index")
    isub = idx.add_subparsers(dest="action", required=True, parser_class=_Parser)
    b = isub.add_parser("build", help="index vectors from CSV (id,x0,x1,...) or .npy + --ids")
    b.add_argument("input")
    b.add_argument("--ids", help="one id per line (for .npy input)")
    b.add_argument("--metric", choices=["dot", "cosine"], default="cosine")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_index_build)
    i = isub.add_parser("info", help="print dim, count and metric")
    i.add_argument("index")
    i.set_defaults(func=cmd_index_info)

    e = sub.add_parser("embed", help="encode structure files into an index (ids = file stems)")
    e.add_argument("inputs", nargs="+")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tower", choices=["pocket", "molecule"], required=True)
    e.add_argument("--metric", choices=["dot", "cosine"], default="cosine")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    for name, query, help_ in (
        ("screen", "--pocket", "rank a molecule index for one pocket"),
        ("fish", "--molecule", "rank a pocket index for one molecule"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument(query, required=True)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--index", required=True)
        s.add_argument("-k", "--k", "--topk", dest="k", type=int, default=100)
        s.add_argument("--metric", choices=["dot", "cosine"], help="must match the index metric if given")
        s.add_argument("--threads", type=int, default=_cores())
        s.add_argument("--out", default="-")
        s.set_defaults(func=cmd_screen)

    t = sub.add_parser("train", help="contrastive training of the two towers")
    t.add_argument("--pairs", help="CSV manifest id,pocket,molecule")
    t.add_argument("--synthetic", type=int, help="train on N generated pairs instead")
    t.add_argument("--validation", help="manifest used for best-epoch selection")
    t.add_argument("--config", help="key = value training config file")
    t.add_argument("--encoder", help="encoder config as JSON")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="screening metrics or target-fishing accuracy@k")
    v.add_argument("--scores", help="CSV id,score (or screen output)")
    v.add_argument("--labels", help="CSV id,label with labels 0/1")
    v.add_argument("--ranks", help="file whose last column is the rank of the true target")
    v.add_argument("--k", type=_int_list, default=[1, 5, 10])
    v.add_argument("--alpha", type=float, default=85.0)
    v.add_argument("--ef", type=_float_list, default=[0.005, 0.01, 0.05], help="EF fractions")
    v.add_argument("--re", type=_float_list, default=[0.005, 0.01, 0.02, 0.05], help="RE false-positive rates")
    v.add_argument("--out", default="-")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("augment", help="filter homologs and cut augmented pockets")
    a.add_argument("--original", required=True)
    a.add_argument("--ligand", required=True)
    a.add_argument("--homolog", action="append", required=True)
    a.add_argument("--map", action="append", required=True, help="CSV orig_residue,homolog_residue")
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_augment)

    bn = sub.add_parser("bench", help="exact-scan throughput on random vectors")
    bn.add_argument("--count", type=int, default=1_000_000)
    bn.add_argument("--dim", type=int, default=128)
    bn.add_argument("--k", type=int, default=100)
    bn.add_argument("--queries", type=int, default=5)
    bn.add_argument("--metric", choices=["dot", "cosine"], default="dot")
    bn.add_argument("--threads", dest="threads_list", type=_int_list, default=[1, _cores()])
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--out", default="-")
    bn.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss component")
    g.add_argument("--checkpoint")
    g.add_argument("--component", choices=["all", "contrastive", "topk", "masked", "denoise", "total"], default="all")
    g.add_argument("--sample", type=int, default=64)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    st = sub.add_parser("selftest", help="run the built-in invariance and oracle checks")
    st.add_argument("--full", action="store_true", help="include the overfit run and the throughput benchmark")
    st.set_defaults(func=cmd_selftest)
    return p


def _tag_leaves(parser: argparse.ArgumentParser) -> None:
    """Remember on each subcommand which parser owns it, for error reporting."""
    parser.set_defaults(_parser=parser)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for child in action.choices.values():
                _tag_leaves(child)


def main(argv=None) -> int:
    parser = build_parser()
    _tag_leaves(parser)
    args, extra = parser.parse_known_args(argv)
    if extra:
        # report against the subcommand so its help (and flag list) is shown
        args._parser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "k", 1) is not None and isinstance(getattr(args, "k", None), int) and args.k < 1:
        print("pocketdex: error: -k must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (PocketdexError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
