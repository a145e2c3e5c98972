"""Command-line entry point: ``dcap prepare|train|evaluate|export-attention|verify``."""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from . import config as cfgmod
from .errors import DcapError, TrainingDiverged
from .featurestore import (
    MIN_FREQUENCY,
    LoadReport,
    load_cache,
    load_delimited,
    load_movielens,
    make_synthetic,
    save_cache,
    split_dataset,
)

log = logging.getLogger("dcap")

PRESETS = {
    "criteo": {"schema": "criteo.schema", "delimiter": "\t", "header": False},
    "avazu": {"schema": "avazu.schema", "delimiter": ",", "header": True},
}


def _bundled_schema(name):
    return resources.files("dcap").joinpath("schemas", name)


# ---------------------------------------------------------------- prepare


def cmd_prepare(args) -> int:
    out = Path(args.out)
    if args.dataset == "movielens":
        raw = Path(args.raw) if args.raw else cfgmod.data_root() / "ml-1m"
        data, report = load_movielens(raw / "ratings.dat", raw / "users.dat", raw / "movies.dat",
                                      args.min_frequency or MIN_FREQUENCY["movielens"])
    elif args.dataset == "synthetic":
        data = make_synthetic(args.samples, seed=args.seed)
        report = LoadReport(len(data), data.n_fields, data.dimension)
    else:
        preset = PRESETS.get(args.dataset, {})
        schema = args.schema or (str(_bundled_schema(preset["schema"])) if preset else None)
        if not args.data or not schema:
            raise DcapError("generic ingestion needs --data and --schema")
        delimiter = args.delimiter if args.delimiter is not None else preset.get("delimiter", "\t")
        header = args.header if args.header is not None else preset.get("header", False)
        min_freq = args.min_frequency or MIN_FREQUENCY.get(args.dataset, 1)
        data, report = load_delimited(args.data, schema, delimiter.encode().decode("unicode_escape"),
                                      header, min_freq, args.max_rows)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cache(data, out)
    lines = [report.stats_line(), f"skipped={report.skipped}", f"positives={int(data.labels.sum())}"]
    lines += [f"field {s.name}: {s.size}" for s in data.schemas]
    lines += [f"note: {n}" for n in report.notes]
    Path(str(out) + ".stats.txt").write_text("\n".join(lines) + "\n")
    print(report.stats_line())
    for n in report.notes:
        print(f"note: {n}")
    return 0


# ------------------------------------------------------------------ train


def _model_config(rc, data, layers, heads):
    from .model import DcapConfig

    return DcapConfig(data.vocab_sizes, data.field_names, embedding_dim=rc.embedding_dim, layers=layers,
                      heads=heads, product=rc.product, hidden=tuple(rc.hidden), dropout=rc.dropout,
                      seed=rc.seed, residual=rc.residual, layer_norm=rc.layer_norm)


def _train_config(rc):
    from .trainer import TrainConfig

    return TrainConfig(lr=rc.lr, weight_decay=rc.weight_decay, batch_size=rc.batch_size,
                       patience=rc.patience, max_epochs=rc.max_epochs,
                       decoupled_weight_decay=rc.decoupled_weight_decay, seed=rc.seed)


def _load_data(path):
    if not path:
        raise DcapError("--data (a prepared cache) is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"prepared dataset not found: {path}")
    return load_cache(path)


def cmd_train(args, rc) -> int:
    from .model import save_checkpoint
    from .trainer import LOG_HEADER, format_cell, run_trials, summarize

    data = _load_data(rc.data)
    split = split_dataset(data, rc.split_seed)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = list(itertools.product(rc.layers, rc.heads)) if rc.model == "dcap" else [(rc.layers[0], rc.heads[0])]
    summary = {"config": {k: v for k, v in vars(rc).items()}, "config_hash": rc.hash(), "runs": []}
    sweep_rows = []
    for layers, heads in grid:
        tag = rc.model if len(grid) == 1 else f"{rc.model}_L{layers}_H{heads}"
        mcfg = _model_config(rc, data, layers, heads)
        tcfg = _train_config(rc)
        logs = {}

        def log_fn(trial, line):
            fh = logs.get(trial)
            if fh is None:
                fh = logs[trial] = open(out / f"train_{tag}_trial{trial}.log", "w")
                fh.write(LOG_HEADER + "\n")
            fh.write(line + "\n")
            fh.flush()
            print(f"[{tag} trial {trial}] {line}", flush=True)

        try:
            results = run_trials(rc.model, split, mcfg, tcfg, rc.trials, log_fn)
        finally:
            for fh in logs.values():
                fh.close()
        trials = []
        for k, r in enumerate(results):
            ck = out / f"ckpt_{tag}_trial{k}.dcapck"
            save_checkpoint(r["model"], ck, {"split_seed": rc.split_seed, "seed": r["seed"],
                                             "best_epoch": r["best_epoch"], "data": str(rc.data)})
            trials.append({k2: r[k2] for k2 in ("seed", "auc", "logloss", "epochs", "best_epoch")}
                          | {"checkpoint": str(ck)})
        auc_m, auc_s = summarize([t["auc"] for t in trials])
        ll_m, ll_s = summarize([t["logloss"] for t in trials])
        run = {"tag": tag, "layers": layers, "heads": heads, "trials": trials,
               "auc_mean": auc_m, "auc_std": auc_s, "logloss_mean": ll_m, "logloss_std": ll_s,
               "auc_cell": format_cell(auc_m, auc_s), "logloss_cell": format_cell(ll_m, ll_s)}
        summary["runs"].append(run)
        sweep_rows.append(f"{layers}\t{heads}\t{run['auc_cell']}\t{run['logloss_cell']}")
        print(f"{tag}: test AUC {run['auc_cell']}  Logloss {run['logloss_cell']}  ({rc.trials} trial(s))")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str) + "\n")
    if len(grid) > 1:
        (out / "sweep.tsv").write_text("layers\theads\tauc\tlogloss\n" + "\n".join(sweep_rows) + "\n")
    return 0


# --------------------------------------------------------------- evaluate


def _split_for_checkpoint(data_path, meta, split_seed):
    data = _load_data(data_path or meta.get("data"))
    seed = split_seed if split_seed is not None else int(meta.get("split_seed", 0))
    return data, split_dataset(data, seed)


def cmd_evaluate(args) -> int:
    from .model import load_checkpoint
    from .trainer import evaluate

    model, meta = load_checkpoint(args.checkpoint)
    data, split = _split_for_checkpoint(args.data, meta, args.split_seed)
    if data.vocab_sizes != model.config.vocab_sizes:
        raise DcapError("checkpoint vocabulary does not match the dataset")
    rep = evaluate(model, split.part(args.part), args.part)
    print(f"split={rep.split} n={rep.count} auc={rep.auc:.6f} logloss={rep.logloss:.6f}")
    return 0


# ------------------------------------------------------- export-attention


def export_attention(model, ids, out_dir):
    """Batch-mean attention per layer and head as TSV files; returns the paths."""
    from .model import DCAP

    if not isinstance(model, DCAP):
        raise DcapError(f"attention export needs a dcap checkpoint, got {model.kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sums, count = None, 0
    for s in range(0, ids.shape[0], 8192):
        _, traces = model.forward(ids[s:s + 8192], return_traces=True)
        chunk = [[w.sum(axis=0) for w in tr.attention.heads] for tr in traces]
        sums = chunk if sums is None else [[a + b for a, b in zip(x, y)] for x, y in zip(sums, chunk)]
        count += min(8192, ids.shape[0] - s)
    names = model.config.field_names
    paths = []
    for l, layer in enumerate(sums, start=1):
        for h, total in enumerate(layer, start=1):
            mean = total / count
            p = out_dir / f"attention_layer{l}_head{h}.tsv"
            rows = ["\t".join(names)] + ["\t".join(f"{v:.10f}" for v in row) for row in mean]
            p.write_text("\n".join(rows) + "\n")
            paths.append(p)
    return paths


def cmd_export_attention(args) -> int:
    from .model import load_checkpoint

    model, meta = load_checkpoint(args.checkpoint)
    data, split = _split_for_checkpoint(args.data, meta, args.split_seed)
    if data.field_names != model.config.field_names or data.vocab_sizes != model.config.vocab_sizes:
        raise DcapError("checkpoint fields/vocabulary do not match the dataset")
    part = split.part(args.part)
    ids = part.ids[: args.samples] if args.samples else part.ids
    paths = export_attention(model, ids, args.out)
    print(f"wrote {len(paths)} attention matrices from {ids.shape[0]} samples to {args.out}")
    return 0


# ----------------------------------------------------------------- verify


def cmd_verify(args) -> int:
    from .verify import format_results, run_suite

    results, report = run_suite(instances=args.instances, seed=args.seed)
    print(format_results(results))
    tsv = report.to_tsv()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "homogeneity.tsv").write_text(tsv)
        (out / "verify.tsv").write_text(
            "check\tresult\tdetail\n"
            + "".join(f"{r.name}\t{'PASS' if r.passed else 'FAIL'}\t{r.detail}\n" for r in results)
        )
    print()
    print(tsv, end="")
    failed = [r for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ----------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="dcap", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("prepare", help="ingest raw data into a DCAPDS1 cache")
    pr.add_argument("--dataset", choices=["movielens", "criteo", "avazu", "generic", "synthetic"], default="movielens")
    pr.add_argument("--raw", help="MovieLens-1M directory (default $DCAP_DATA_DIR/ml-1m)")
    pr.add_argument("--data", help="delimited data file for criteo/avazu/generic")
    pr.add_argument("--schema", help="schema side-file (name kind per line)")
    pr.add_argument("--delimiter")
    pr.add_argument("--header", action=argparse.BooleanOptionalAction, default=None)
    pr.add_argument("--min-frequency", type=int)
    pr.add_argument("--max-rows", type=int)
    pr.add_argument("--samples", type=int, default=20000, help="synthetic sample count")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True, help="cache file to write")

    tr = sub.add_parser("train", help="train a model (or a layers x heads grid)")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--data", help="prepared cache")
    tr.add_argument("--model", choices=["dcap", "lr", "fm"])
    tr.add_argument("--embedding-dim", type=int)
    tr.add_argument("--layers", help="e.g. 2, 1,2,3 or 1..5")
    tr.add_argument("--heads", help="e.g. 4 or 1,2,4,8,16")
    tr.add_argument("--product", choices=["inner", "outer"])
    tr.add_argument("--hidden", help="hidden sizes, e.g. 100,100")
    tr.add_argument("--dropout", type=float)
    tr.add_argument("--residual", action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--layer-norm", action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--weight-decay", type=float)
    tr.add_argument("--decoupled-weight-decay", action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--patience", type=int)
    tr.add_argument("--max-epochs", type=int)
    tr.add_argument("--trials", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--split-seed", type=int)
    tr.add_argument("--out")

    ev = sub.add_parser("evaluate", help="AUC and logloss of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", help="prepared cache (default: path stored in the checkpoint)")
    ev.add_argument("--part", choices=["train", "validation", "test"], default="test")
    ev.add_argument("--split-seed", type=int)

    ex = sub.add_parser("export-attention", help="write mean attention matrices as TSV")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--data")
    ex.add_argument("--part", choices=["train", "validation", "test"], default="test")
    ex.add_argument("--samples", type=int, default=0, help="limit the number of samples (0 = all)")
    ex.add_argument("--split-seed", type=int)
    ex.add_argument("--out", required=True)

    ve = sub.add_parser("verify", help="run the verification suite")
    ve.add_argument("--instances", type=int, default=100, help="random reference-layer instances")
    ve.add_argument("--seed", type=int, default=0)
    ve.add_argument("--out", help="directory for homogeneity.tsv and verify.tsv")
    return p


TRAIN_FLAGS = [
    "data", "model", "embedding_dim", "layers", "heads", "product", "hidden", "dropout", "residual",
    "layer_norm", "lr", "weight_decay", "decoupled_weight_decay", "batch_size", "patience", "max_epochs",
    "trials", "seed", "split_seed", "out",
]


def run_config_from_args(args):
    flags = {k: getattr(args, k, None) for k in TRAIN_FLAGS}
    return cfgmod.resolve(flags, args.config)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "prepare":
            return cmd_prepare(args)
        if args.command == "train":
            return cmd_train(args, run_config_from_args(args))
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "export-attention":
            return cmd_export_attention(args)
        if args.command == "verify":
            return cmd_verify(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (DcapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
