"""Command line: ``clusterinr {synth,encode,decode,eval,inspect}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import model_store
from .clustering import leaf_name
from .config import ConfigError, RunConfig, load_config
from .data_io import DatasetFormatError, raw_size_bytes, read_dataset, synthesize, write_dataset
from .evaluate import FingerprintMismatch, decode, evaluate_model, export_error_map
from .trainer import PipelineError, PipelineReport, run_pipeline

log = logging.getLogger("clusterinr")


class CommandError(Exception):
    pass


def _write_kv(path: Path, items: dict) -> None:
    with open(path, "w") as f:
        for k, v in items.items():
            f.write(f"{k} = {v}\n")


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    overrides = {k: v for k, v in {
        "synth_points": args.points, "synth_timesteps": args.timesteps, "synth_fields": args.fields,
        "synth_noise": args.noise, "synth_seed": args.seed, "synth_density": args.density,
    }.items() if v is not None}
    cfg.update(**overrides)
    spec = cfg.synth_spec()
    try:
        ds = synthesize(spec)
    except ValueError as e:
        raise CommandError(str(e)) from None
    n = write_dataset(ds, args.out)
    print(f"points = {spec.point_count}\ntimesteps = {spec.timesteps}\nfields = {','.join(spec.fields)}\n"
          f"variables = {','.join(ds.variable_names)}\nnoise = {spec.noise!r}\nseed = {spec.seed}\n"
          f"density = {spec.density}\nbytes = {n}")
    return 0


# ---------------------------------------------------------------- encode


def _encode_overrides(args) -> dict:
    out = {}
    for key, attr in (("k", "k"), ("residual_threshold", "tau"), ("width", "width"), ("seed", "seed"),
                      ("worker_count", "workers"), ("batch_size", "batch_size"), ("max_epochs", "max_epochs"),
                      ("meta_iterations", "meta_iterations"), ("max_split_depth", "max_split_depth")):
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    if args.no_meta:
        out["use_meta"] = False
    if args.no_recluster:
        out["max_split_depth"] = 0
    if args.shared_head:
        out["shared_head"] = True
    for item in args.set or []:
        if "=" not in item:
            raise CommandError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_encode(args) -> int:
    cfg = load_config(args.config).update(**_encode_overrides(args))
    ds = read_dataset(args.data)
    out = Path(args.out)
    net = cfg.network_config(ds.variable_count)
    report = PipelineReport([], [], {})
    t0 = time.time()
    model = run_pipeline(ds, cfg.train_config(), net, cfg.meta_config(), report)
    elapsed = time.time() - t0
    size = model_store.save(model, out)
    cr = model_store.compression_ratio(ds, out)

    echo = out.with_name(out.name + ".config")
    echo.write_text(f"# data = {Path(args.data).resolve()}\n" + cfg.dumps())

    items = {"data": Path(args.data).resolve(), "model_bytes": size, "raw_bytes": raw_size_bytes(ds),
             "compression_ratio": f"{cr:.2f}", "parameters": model.parameter_count,
             "width": net.width, "k": cfg.k, "leaf_count": len(model.networks),
             "split_count": len(report.splits), "train_seconds": f"{elapsed:.1f}"}
    for res in report.splits:
        items[f"split.{leaf_name(res.leaf_id)}.residual"] = f"{res.residual:.6e}"
    for res in sorted(report.leaves, key=lambda r: r.leaf_id):
        p = f"leaf.{leaf_name(res.leaf_id)}"
        items[f"{p}.points"] = res.point_count
        items[f"{p}.epochs"] = res.epochs_run
        items[f"{p}.best_loss"] = f"{res.best_loss:.6e}"
        items[f"{p}.residual"] = f"{res.residual:.6e}"
        items[f"{p}.split_performed"] = str(res.split_performed).lower()
        items[f"{p}.terminal"] = res.terminal_reason
    _write_kv(out.with_name(out.name + ".report"), items)
    print(f"wrote {out} ({size} bytes, CR {cr:.2f}, {len(model.networks)} leaves, {len(report.splits)} splits)")
    return 0


# ---------------------------------------------------------------- decode


def _read_queries(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and [c.strip() for c in row[:4]] == ["x", "y", "z", "t"]:
                continue
            if len(row) != 4:
                raise CommandError(f"{path}:{lineno}: expected 4 columns x,y,z,t, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise CommandError(f"{path}:{lineno}: malformed query row {row}") from None
            if not all(np.isfinite(vals)):
                raise CommandError(f"{path}:{lineno}: non-finite query")
            rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def cmd_decode(args) -> int:
    model = model_store.load(args.model)
    queries = _read_queries(args.queries)
    values = decode(model, queries) if len(queries) else np.empty((0, model.fingerprint.variable_count))
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "z", "t", *model.fingerprint.variable_names])
        for q, v in zip(queries, values):
            w.writerow([repr(float(c)) for c in q] + [repr(float(x)) for x in v])
    print(f"decoded {len(queries)} queries -> {args.out}")
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    model = model_store.load(args.model)
    ds = read_dataset(args.data)
    report = evaluate_model(model, ds)
    print(report.table())
    if args.report:
        _write_kv(Path(args.report), report.as_dict())
    if args.error_map:
        export_error_map(ds, model, args.error_map, args.error_map_format)
        print(f"error map -> {args.error_map}")
    return 0


# ---------------------------------------------------------------- inspect


def cmd_inspect(args) -> int:
    path = Path(args.model)
    model = model_store.load(path)
    arch = model.architecture
    fp = model.fingerprint
    print(f"file: {path} ({path.stat().st_size} bytes, format v{model.version})")
    print(f"dataset: {fp.describe()}")
    print(f"K = {len(model.partition.roots)}")
    print(f"leaves = {len(model.partition.leaf_ids())}")
    print(f"networks = {len(model.networks)}")
    print(f"width = {arch.width}, PE frequencies = {arch.pe.num_frequencies}, "
          f"blocks = {arch.gfe_blocks} shared + {arch.lfe_blocks} per branch x {arch.n_branches}, "
          f"shared_head = {str(arch.shared_head).lower()}")
    print(f"parameters = {model.parameter_count} ({arch.parameter_count} per network)")
    for root in model.partition.roots:
        depth = max(leaf.depth for leaf in root.leaves())
        print(f"  tree {root.leaf_id[0]}: {sum(1 for _ in root.leaves())} leaves, depth {depth}")
    for leaf in model.partition.leaf_ids():
        st = model.stats[leaf]
        print(f"  leaf {leaf_name(leaf)}: {st.point_count} points, residual {st.aggregate_mse:.4e}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clusterinr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="per-epoch progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic MCDS dataset")
    s.add_argument("--points", type=int)
    s.add_argument("--timesteps", type=int)
    s.add_argument("--fields", help="comma list of trig,bump,discontinuity,contrast")
    s.add_argument("--noise", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--density", choices=["uniform", "clustered"])
    s.add_argument("--config")
    s.add_argument("--out", "-o", required=True)
    s.set_defaults(parser=s, func=cmd_synth)

    e = sub.add_parser("encode", help="train a model for a dataset")
    e.add_argument("data")
    e.add_argument("--config")
    e.add_argument("--out", "-o", required=True)
    e.add_argument("--k", type=int)
    e.add_argument("--tau", type=float)
    e.add_argument("--width", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--batch-size", type=int)
    e.add_argument("--max-epochs", type=int)
    e.add_argument("--max-split-depth", type=int)
    e.add_argument("--meta-iterations", type=int)
    e.add_argument("--no-meta", action="store_true", help="fine-tune from random init")
    e.add_argument("--no-recluster", action="store_true", help="never split clusters")
    e.add_argument("--shared-head", action="store_true", help="one branch shared by all variables")
    e.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    e.set_defaults(parser=e, func=cmd_encode)

    d = sub.add_parser("decode", help="predict values at query points")
    d.add_argument("model")
    d.add_argument("queries", help="CSV of x,y,z,t rows (header optional)")
    d.add_argument("out")
    d.set_defaults(parser=d, func=cmd_decode)

    v = sub.add_parser("eval", help="PSNR / NRMSE / R2 of a model against its dataset")
    v.add_argument("model")
    v.add_argument("data")
    v.add_argument("--report", help="also write metrics as key = value")
    v.add_argument("--error-map")
    v.add_argument("--error-map-format", choices=["csv", "mcds-delta"], default="csv")
    v.set_defaults(parser=v, func=cmd_eval)

    i = sub.add_parser("inspect", help="summarize a model file")
    i.add_argument("model")
    i.set_defaults(parser=i, func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CommandError, ConfigError, DatasetFormatError, model_store.ModelFormatError,
            FingerprintMismatch, PipelineError, OSError, ValueError) as e:
        if isinstance(e, CommandError):
            args.parser.print_usage(sys.stderr)
        print(f"clusterinr {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
