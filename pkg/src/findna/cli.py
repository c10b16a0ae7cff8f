"""``findna`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
import tracemalloc
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import ndiff as nd
from .augment import ABLATION_PAIRS, AugmentationError, PipelineConfigError, corpus_kl, parse_pair, pipeline_from_codes
from .config import ConfigError
from .distill import LOSS_CSV_HEADER, Distiller, DistillConfigError, cm_mnm, gradient_check
from .evalkit import EvalError, ProbeReport, ensure_splits, finetune, linear_probe
from .mixer import MixerConfig, MixerConfigError, matmul_flops
from .seqcore import (
    FastaParseError,
    NucleotideSequence,
    SequenceError,
    load_labeled_csv,
    parse_fasta,
    sample_windows,
)

log = logging.getLogger("findna")

USAGE_ERRORS = (ConfigError, MixerConfigError, DistillConfigError, PipelineConfigError, EvalError)
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run directory plumbing


def make_run_dir(root: str | Path, command: str, payload: dict) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    run = Path(root) / f"{command}-{stamp}-{cfgmod.config_hash(payload)}"
    suffix = 1
    base = run
    while run.exists():
        run = Path(f"{base}.{suffix}")
        suffix += 1
    run.mkdir(parents=True)
    return run


def write_manifest(run: Path, command: str, args: argparse.Namespace, resolved: dict, seed: int) -> None:
    argv = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "seed": seed,
        "code_version": __version__,
        "config": resolved,
        "arguments": argv,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    (run / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _resolve_configs(args) -> tuple[dict, int]:
    values = cfgmod.apply_overrides(cfgmod.load_source(args.config), args.set or [])
    seed = cfgmod.resolve_seed(args.seed, values.get("distill", {}).get("seed", 0))
    values.setdefault("distill", {})["seed"] = seed
    values.setdefault("probe", {})["seed"] = seed
    return cfgmod.build(values), seed


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_corpus(args) -> list[NucleotideSequence]:
    records = parse_fasta(_require_file(args.corpus, "corpus"), coerce_ambiguous=args.coerce_ambiguous_to_n)
    if args.windows:
        return sample_windows(records, args.window, args.windows, args.window_seed)
    return records


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args, built: dict, seed: int, run: Path) -> int:
    mcfg: MixerConfig = built["mixer"]
    dcfg = built["distill"]
    if args.epochs is not None:
        dcfg = replace(dcfg, epochs=args.epochs)
    if args.batch_size is not None:
        dcfg = replace(dcfg, batch_size=args.batch_size)
    if args.cm_mnm:
        dcfg = cm_mnm(dcfg)
    corpus = _load_corpus(args) if dcfg.epochs > 0 or args.corpus else []
    u = pipeline_from_codes(args.u_pipeline, args.noise_first) if args.u_pipeline else None
    v = pipeline_from_codes(args.v_pipeline, args.noise_first) if args.v_pipeline else None
    distiller = Distiller(mcfg, dcfg, u, v, workers=args.workers)

    loss_path = run / "loss.csv"
    with open(loss_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_CSV_HEADER)
        per_epoch = math.ceil(len(corpus) / dcfg.batch_size) if corpus else 0

        def on_step(epoch, rec):
            writer.writerow(rec.row())
            last_in_epoch = (rec.step + 1) % per_epoch == 0
            if last_in_epoch and args.checkpoint_every and (epoch + 1) % args.checkpoint_every == 0:
                distiller.save(run / f"epoch{epoch + 1:03d}.ckpt", {"epoch": epoch + 1})
            if rec.step % max(1, args.log_every) == 0:
                log.info("step %d lr %.2e lambda %.5f mnm %.4f cl %.4f", rec.step, rec.lr, rec.lam, rec.mnm, rec.cl)

        if dcfg.epochs > 0 and not corpus:
            raise UsageError("corpus is empty")
        distiller.fit(corpus, callback=on_step)
    final = run / "final.ckpt"
    distiller.save(final, {"epoch": dcfg.epochs})
    print(final)
    return EXIT_OK


def _probe_like(args, built: dict, seed: int, run: Path, mode: str) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    data = _require_file(args.data, "data")
    pcfg = replace(built["probe"], mode=mode)
    for flag, key in (("network", "network"), ("representation", "representation"), ("head", "head"),
                      ("epochs", "epochs"), ("batch", "batch"), ("lr", "lr")):
        value = getattr(args, flag, None)
        if value is not None:
            pcfg = replace(pcfg, **{key: value})
    dataset = load_labeled_csv(data, args.num_classes, coerce_ambiguous=args.coerce_ambiguous_to_n)
    if dataset.splits is None:
        dataset = ensure_splits(dataset, seed, persist_to=run / "data_with_splits.csv")
    if mode == "linear_probe":
        report, _ = linear_probe(dataset, ckpt, pcfg)
    else:
        report = finetune(dataset, ckpt, pcfg)
    stem = f"{'probe' if mode == 'linear_probe' else 'finetune'}_{pcfg.network}"
    report.write_json(run / f"{stem}.json")
    report.write_csv(run / f"{stem}.csv")
    print(f"{stem}: top1={report.top1_accuracy:.4f} mcc={report.mcc:.4f} f1={report.f1_macro:.4f} "
          f"(majority baseline {report.majority_baseline:.4f})")
    return EXIT_OK


def cmd_probe(args, built, seed, run) -> int:
    return _probe_like(args, built, seed, run, "linear_probe")


def cmd_finetune(args, built, seed, run) -> int:
    return _probe_like(args, built, seed, run, "finetune")


def random_windows(count: int, length: int, seed: int) -> list[NucleotideSequence]:
    rng = np.random.default_rng(seed)
    letters = np.array(list("ACGT"))
    return [NucleotideSequence(f"rand{i}", "".join(rng.choice(letters, length))) for i in range(count)]


def cmd_augstats(args, built, seed, run) -> int:
    corpus = _load_corpus(args) if args.corpus else random_windows(args.random, args.length, seed)
    pairs = args.pairs or list(ABLATION_PAIRS)
    if args.assert_min and args.assert_min not in pairs:
        raise UsageError(f"--assert-min {args.assert_min} is not among the pairs")
    rows = []
    for name in pairs:
        u, v = parse_pair(name, args.noise_first)
        rows.append((name, corpus_kl(corpus, u, v, seed, tie_seeds=args.tie_seeds)))
    out = run / "kl.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "kl"])
        w.writerows(rows)
    for name, kl in rows:
        print(f"{name},{kl:.6g}")
    if args.assert_min:
        target = dict(rows)[args.assert_min]
        others = [kl for name, kl in rows if name != args.assert_min]
        if not all(target < kl for kl in others):
            print(f"assertion failed: {args.assert_min} is not the strict minimum", file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_gradcheck(args, built, seed, run) -> int:
    mcfg, dcfg = built["mixer"], replace(built["distill"], seed=seed)
    if mcfg.dropout_rate:
        mcfg = replace(mcfg, dropout_rate=0.0)
    length = args.length or mcfg.max_length - dcfg.num_cls
    report = gradient_check(mcfg, dcfg, length=length, batch=args.batch, tolerance=args.tolerance, h=args.h)
    lines = report.lines()
    (run / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return EXIT_OK if report.passed else EXIT_RUNTIME


def _bench_batch(distiller: Distiller, batch, step: int) -> float:
    t = time.perf_counter()
    distiller.train_step(batch, step, step + 2)
    return time.perf_counter() - t


def run_bench(mcfg: MixerConfig, dcfg, length: int, batches: int, seed: int) -> dict:
    """Per-batch training time and peak traced memory for FinDNA and the CM-MNM ablation."""
    corpus = random_windows(dcfg.batch_size, length, seed)
    modes = {"findna": Distiller(mcfg, dcfg), "cm_mnm": Distiller(mcfg, cm_mnm(dcfg))}
    for d in modes.values():
        _bench_batch(d, corpus, 0)  # warm-up (kernel compilation, allocator)
    times = {m: [] for m in modes}
    for i in range(batches):
        order = list(modes) if i % 2 == 0 else list(modes)[::-1]
        for m in order:
            times[m].append(_bench_batch(modes[m], corpus, i + 1))
    peaks = {}
    for m, d in modes.items():
        tracemalloc.start()
        d.train_step(corpus, batches + 1, batches + 3)
        peaks[m] = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
    result = {m: {"ms_per_batch": 1e3 * float(np.median(t)), "peak_mib": peaks[m] / 2**20} for m, t in times.items()}
    result["ratio"] = result["findna"]["ms_per_batch"] / result["cm_mnm"]["ms_per_batch"]
    return result


def full_scale_flops(tokens: int = 1010, num_cls: int = 10) -> dict:
    """Analytic matmul FLOPs per sequence at the default (full) model size."""
    full = MixerConfig()
    fwd = matmul_flops(full, tokens)
    teacher_fwd = matmul_flops(full, tokens, head_width=0)
    # backward costs two forward-sized products per matmul
    return {"cm_mnm": 3 * fwd, "findna": 3 * fwd + teacher_fwd, "num_cls": num_cls}


def cmd_bench(args, built, seed, run) -> int:
    mcfg, dcfg = built["mixer"], built["distill"]
    if args.batch_size:
        dcfg = replace(dcfg, batch_size=args.batch_size)
    length = args.length or mcfg.max_length - dcfg.num_cls
    res = run_bench(mcfg, dcfg, length, args.batches, seed)
    flops = full_scale_flops()
    with open(run / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "ms_per_batch", "peak_mib", "full_scale_matmul_flops_per_seq"])
        for m in ("findna", "cm_mnm"):
            w.writerow([m, f"{res[m]['ms_per_batch']:.3f}", f"{res[m]['peak_mib']:.2f}", flops[m]])
    for m in ("findna", "cm_mnm"):
        print(f"{m}: {res[m]['ms_per_batch']:.2f} ms/batch, peak {res[m]['peak_mib']:.1f} MiB, "
              f"full-size matmul FLOPs/seq {flops[m]:.3e}")
    print(f"ratio findna/cm_mnm: {res['ratio']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="preset name (paper_defaults, desk, micro) or INI file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="overrides the config seed; FINDNA_SEED is the fallback")
    common.add_argument("--workers", type=int, default=1, help="threads for batch-item forwards")
    common.add_argument("--runs-dir", default="runs", help="parent directory for run outputs")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("--coerce-ambiguous-to-n", action="store_true", help="map IUPAC ambiguity codes to N")
    common.add_argument("-v", "--verbose", action="store_true")

    corpus = argparse.ArgumentParser(add_help=False)
    corpus.add_argument("--corpus", help="FASTA file")
    corpus.add_argument("--windows", type=int, default=0, help="sample this many windows from the corpus")
    corpus.add_argument("--window", type=int, default=128, help="window length in bases")
    corpus.add_argument("--window-seed", type=int, default=0)
    corpus.add_argument("--noise-first", action="store_true", help="apply noise before reverse-complement")

    parser = argparse.ArgumentParser(prog="findna", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"findna {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common, corpus], help="self-distillation pretraining")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--u-pipeline", help="student view codes, e.g. DITM")
    p.add_argument("--v-pipeline", help="teacher view codes, e.g. RN")
    p.add_argument("--cm-mnm", action="store_true", help="masked-modeling-only ablation")
    p.add_argument("--checkpoint-every", type=int, default=0, help="epochs between checkpoints (0: final only)")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("probe", cmd_probe, "linear probe on frozen features"),
                                 ("finetune", cmd_finetune, "fine-tune backbone and head")):
        q = sub.add_parser(name, parents=[common], help=helptext)
        q.add_argument("--checkpoint")
        q.add_argument("--data", help="CSV with sequence,label[,split]")
        q.add_argument("--num-classes", type=int, default=2)
        q.add_argument("--network", choices=("teacher", "student"))
        q.add_argument("--representation", choices=("cls_mean", "pos_mean", "concat_both"))
        q.add_argument("--head", choices=("linear", "mlp2"))
        q.add_argument("--epochs", type=int)
        q.add_argument("--batch", type=int)
        q.add_argument("--lr", type=float)
        q.set_defaults(func=func)

    a = sub.add_parser("augstats", parents=[common, corpus], help="KL dissimilarity of view pipeline pairs")
    a.add_argument("--pairs", nargs="+", help=f"pairs such as M+NoAug (default: {' '.join(ABLATION_PAIRS)})")
    a.add_argument("--random", type=int, default=1000, help="random windows to use without --corpus")
    a.add_argument("--length", type=int, default=1000)
    a.add_argument("--tie-seeds", action="store_true", help="give both views the same seed")
    a.add_argument("--assert-min", metavar="PAIR", help="exit 1 unless PAIR has the strictly smallest KL")
    a.set_defaults(func=cmd_augstats)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full loss")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--h", type=float, default=1e-4)
    g.add_argument("--length", type=int)
    g.add_argument("--batch", type=int, default=2)
    g.set_defaults(func=cmd_gradcheck, default_config="micro")

    b = sub.add_parser("bench", parents=[common], help="FinDNA vs CM-MNM time and memory per batch")
    b.add_argument("--batches", type=int, default=5)
    b.add_argument("--batch-size", type=int)
    b.add_argument("--length", type=int)
    b.set_defaults(func=cmd_bench, default_config="desk")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.config is None:
        args.config = getattr(args, "default_config", None)
    try:
        built, seed = _resolve_configs(args)
        if args.print_config:
            print(cfgmod.to_ini(built), end="")
            return EXIT_OK
        resolved = {k: v.to_dict() for k, v in built.items()}
        run = make_run_dir(args.runs_dir, args.command, {"config": resolved, "command": args.command})
        write_manifest(run, args.command, args, resolved, seed)
        return args.func(args, built, seed, run)
    except (UsageError, *USAGE_ERRORS, FileNotFoundError, FastaParseError, SequenceError) as exc:
        print(f"findna {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except nd.CheckpointError as exc:
        print(f"findna {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AugmentationError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"findna {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
