"""Command-line front end.

Subcommands: synth, convert, train, build-store, eval, inspect. Every
command is a pure function of (input files, config, seed); re-running
writes byte-identical artifacts apart from timing fields, and the
resolved configuration is echoed into each run directory.

Exit codes: 0 ok, 2 config error, 3 IO error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

from . import config as C
from . import data as D
from . import datastore as DS
from . import encoder as E
from . import forecaster as F
from . import graph as G
from . import tensor as T
from . import trainer as TR
from .errors import (ConfigError, DataLoadError, NeighborcastError,
                     NumericError, RequestError, StoreLoadError)

log = logging.getLogger("neighborcast")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads:
        _limit_threads(args.threads)
    try:
        return args.func(args)
    except (ConfigError, RequestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataLoadError, StoreLoadError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except NeighborcastError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def _limit_threads(n: int) -> None:
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:  # pragma: no cover
        log.warning("threadpoolctl unavailable; --threads ignored")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neighborcast",
        description="Retrieval-augmented multivariate time-series forecasting")
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument("--threads", type=int, default=0,
                        help="cap BLAS worker threads (0 = library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic motif benchmark")
    p.add_argument("--nodes", type=int, default=16)
    p.add_argument("--steps", type=int, default=8064)
    p.add_argument("--period", type=int, default=288)
    p.add_argument("--motif-len", type=int, default=36)
    p.add_argument("--motif-count", type=int, default=8)
    p.add_argument("--motif-repeats", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--ring-graph", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert between csv and kmtsbin")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--sample-rate", type=int, default=5,
                   help="minutes per step when reading csv")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train the encoder")
    _common_config_flags(p)
    p.add_argument("--mode", choices=E.MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--val-max-windows", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-store", help="cache encoder keys for a split")
    _common_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--subsample-seed", type=int, default=0)
    p.add_argument("--force", action="store_true",
                   help="overwrite a store built from a different checkpoint")
    p.add_argument("--ivf-nlist", type=int, default=0,
                   help="also build an inverted-file sidecar index")
    p.add_argument("--ivf-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_store)

    p = sub.add_parser("eval", help="evaluate a checkpoint, with or without store")
    _common_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store")
    p.add_argument("--no-store", action="store_true")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--index", choices=("exact", "ivf"))
    p.add_argument("--ivf")
    p.add_argument("--n-probe", type=int)
    p.add_argument("--k-grid", help="comma list or lo..hi[:step], e.g. 1..100:5")
    p.add_argument("--alpha-grid", help="comma list or lo..hi:step")
    p.add_argument("--per-node", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump the neighbors behind one forecast")
    _common_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--end-step", type=int, required=True,
                   help="global index of the last history step")
    p.add_argument("--k", type=int)
    p.add_argument("--exclude-self", action="store_true",
                   help="drop the query's own datastore entry (diagnostics)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def _common_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--data", help="dataset path (csv or kmtsbin)")
    p.add_argument("--adjacency", help="predefined dependency graph file")


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_config(args, extra: dict | None = None) -> C.RunConfig:
    overrides: dict[str, dict] = {"data": {}, "model": {}, "train": {},
                                  "forecast": {}}
    if getattr(args, "data", None):
        overrides["data"]["dataset"] = args.data
    if getattr(args, "adjacency", None):
        overrides["data"]["adjacency"] = args.adjacency
    if extra:
        for section, content in extra.items():
            overrides[section].update(content)
    overrides = {k: v for k, v in overrides.items() if v}
    return C.load_run_config(getattr(args, "config", None), overrides)


def _infer_format(path: str, declared: str = "") -> str:
    if declared:
        return declared
    if path.endswith(".csv"):
        return "csv"
    if path.endswith(".kmtsbin"):
        return "kmtsbin"
    raise ConfigError(
        f"cannot infer format of {path!r}; use [data].format or a "
        ".csv/.kmtsbin extension")


def _load_pipeline(run: C.RunConfig):
    if not run.data.dataset:
        raise ConfigError("no dataset configured (set [data].dataset or --data)")
    fmt = _infer_format(run.data.dataset, run.data.format)
    dataset = D.load_dataset(run.data.dataset, fmt,
                             sample_rate_minutes=run.data.sample_rate_minutes)
    spec = D.SplitSpec(tuple(run.data.split))
    train, val, test = D.chronological_split(dataset, spec)
    normalizer = D.fit_normalizer(train)
    prepared = {
        "train": D.prepare_split(train, normalizer),
        "val": D.prepare_split(val, normalizer),
        "test": D.prepare_split(test, normalizer),
    }
    graph = None
    if run.data.adjacency:
        graph = G.DependencyGraph.from_adjacency(
            G.load_adjacency(run.data.adjacency))
        if graph.n_nodes != dataset.n_nodes:
            raise ConfigError(
                f"adjacency has {graph.n_nodes} nodes, dataset has "
                f"{dataset.n_nodes}")
    return dataset, prepared, normalizer, graph


def _encoder_config(run: C.RunConfig, n_nodes: int, use_graph: bool
                    ) -> E.EncoderConfig:
    m = run.model
    return E.EncoderConfig(
        n_nodes=n_nodes, input_len=m.input_len, seg_len=m.seg_len,
        horizon=m.horizon, d_model=m.d_model, n_heads=m.n_heads,
        n_transformer_layers=m.n_transformer_layers, ffn_mult=m.ffn_mult,
        short_layers=m.short_layers, filter_len=m.filter_len,
        dilations=tuple(m.dilations), diffusion_order=m.diffusion_order,
        adaptive_dim=m.adaptive_dim, mode=m.mode, key_tap=m.key_tap,
        use_graph=use_graph, dropout=m.dropout)


def _write_run_dir(out_dir: str, run: C.RunConfig) -> Path:
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.resolved.toml").write_text(run.resolved_toml())
    return path


def _write_eval_csv(path, report: F.EvalReport) -> None:
    with open(path, "w", newline="") as f:
        f.write("scope,mae,rmse,mape,count\n")
        for scope, m in report.rows():
            f.write(f"{scope},{_fmt(m.mae)},{_fmt(m.rmse)},{_fmt(m.mape)},"
                    f"{m.count}\n")
        if report.per_node:
            for node, m in sorted(report.per_node.items()):
                f.write(f"node_{node},{_fmt(m.mae)},{_fmt(m.rmse)},"
                        f"{_fmt(m.mape)},{m.count}\n")


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _print_report(title: str, report: F.EvalReport) -> None:
    print(title)
    print(f"{'scope':<12}{'MAE':>12}{'RMSE':>12}{'MAPE':>12}{'count':>10}")
    for scope, m in report.rows():
        mae = "-" if m.mae is None else f"{m.mae:.4f}"
        rmse = "-" if m.rmse is None else f"{m.rmse:.4f}"
        mape = "-" if m.mape is None else f"{m.mape * 100:.2f}%"
        print(f"{scope:<12}{mae:>12}{rmse:>12}{mape:>12}{m.count:>10}")


def _parse_grid(text: str, integer: bool) -> list:
    """Grid syntax: "1,5,25" or "lo..hi" or "lo..hi:step".

    Integer ranges default to step 1; float ranges without a step expand
    to 10 evenly spaced points.
    """
    text = text.strip()
    if ".." in text:
        span, _, step = text.partition(":")
        lo, _, hi = span.partition("..")
        try:
            if integer:
                step_v = int(step) if step else 1
                vals = list(range(int(lo), int(hi) + 1, step_v))
            else:
                lo_v, hi_v = float(lo), float(hi)
                step_v = float(step) if step else (hi_v - lo_v) / 9.0
                if step_v <= 0:
                    raise ConfigError(f"grid step must be positive in {text!r}")
                n = int(round((hi_v - lo_v) / step_v))
                vals = [lo_v + i * step_v for i in range(n + 1)
                        if lo_v + i * step_v <= hi_v + 1e-12]
        except ValueError:
            raise ConfigError(f"cannot parse grid {text!r}") from None
    else:
        try:
            vals = [int(x) if integer else float(x) for x in text.split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse grid {text!r}") from None
    if not vals:
        raise ConfigError(f"grid {text!r} is empty")
    return vals


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = D.SynthConfig(
        n_nodes=args.nodes, n_steps=args.steps, period=args.period,
        motif_len=args.motif_len, motif_count=args.motif_count,
        motif_repeats=args.motif_repeats, noise_std=args.noise,
        ring_graph=args.ring_graph)
    dataset, placements = D.synth_generate(cfg, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.out.endswith(".csv"):
        D.save_csv(dataset, out)
    else:
        D.save_kmtsbin(dataset, out)
    stem = str(out.with_suffix("")) if out.suffix else str(out)
    D.save_placements_csv(placements, f"{stem}_motifs.csv")
    if cfg.ring_graph:
        adj = G.ring_adjacency(cfg.n_nodes)
        with open(f"{stem}_adjacency.csv", "w") as f:
            for row in adj:
                f.write(",".join(str(x) for x in row) + "\n")
    print(f"wrote {out} ({dataset.n_steps} x {dataset.n_nodes} x "
          f"{dataset.n_channels}), {len(placements)} motif instances")
    print(f"sha256 {_sha256(out)}")
    return EXIT_OK


def cmd_convert(args) -> int:
    in_fmt = _infer_format(args.input)
    out_fmt = _infer_format(args.output)
    dataset = D.load_dataset(args.input, in_fmt,
                             sample_rate_minutes=args.sample_rate)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    if out_fmt == "csv":
        D.save_csv(dataset, args.output)
    else:
        D.save_kmtsbin(dataset, args.output)
    print(f"converted {args.input} -> {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    extra = {"model": {}, "train": {}}
    if args.mode:
        extra["model"]["mode"] = args.mode
    for flag, key in (("epochs", "max_epochs"), ("lr", "lr"),
                      ("batch_size", "batch_size"), ("patience", "patience"),
                      ("steps_per_epoch", "steps_per_epoch"),
                      ("val_max_windows", "val_max_windows"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            extra["train"][key] = value
    run = _run_config(args, extra)
    dataset, prepared, normalizer, graph = _load_pipeline(run)
    cfg = _encoder_config(run, dataset.n_nodes, use_graph=graph is not None)
    tr = run.train
    tcfg = TR.TrainConfig(
        lr=tr.lr, batch_size=tr.batch_size, max_epochs=tr.max_epochs,
        patience=min(tr.patience, tr.max_epochs), seed=tr.seed,
        mask_null_value=run.data.null_value,
        grad_clip=tr.grad_clip or None,
        steps_per_epoch=tr.steps_per_epoch or None,
        val_max_windows=tr.val_max_windows or None)

    out_dir = _write_run_dir(args.out_dir, run)
    params = E.init_params(cfg, T.make_rng(tcfg.seed))
    t0 = time.perf_counter()
    result = TR.fit(params, cfg, prepared["train"], prepared["val"], tcfg,
                    graph=graph, normalizer=normalizer)
    elapsed = time.perf_counter() - t0

    ckpt = out_dir / "checkpoint.kmtw"
    E.save_checkpoint(result.params, cfg, ckpt)
    TR.write_trace(result.trace, out_dir / "trace.csv")
    print(f"trained {cfg.mode} encoder: {len(result.trace)} epochs in "
          f"{elapsed:.1f}s, best val MAE "
          f"{result.best_val_mae if result.best_val_mae < float('inf') else 'n/a'}")
    print(f"checkpoint {ckpt}")
    print(f"sha256 {_sha256(ckpt)}")
    if result.diverged:
        print("error: training diverged; last good checkpoint kept",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_build_store(args) -> int:
    run = _run_config(args)
    params, cfg = E.load_checkpoint(args.checkpoint)
    dataset, prepared, normalizer, graph = _load_pipeline(run)
    if cfg.use_graph and graph is None:
        raise ConfigError("checkpoint expects a predefined graph; pass --adjacency")
    split = prepared[args.split]

    out = Path(args.out)
    if out.exists() and not args.force:
        existing = DS.peek_store_fingerprint(out)
        if existing != E.fingerprint(params, cfg):
            raise ConfigError(
                f"{out} was built from a different checkpoint; "
                "pass --force to replace it")

    t0 = time.perf_counter()
    store = DS.build_datastore(params, cfg, split, graph=graph,
                               batch_size=run.forecast.batch_size)
    build_s = time.perf_counter() - t0
    if args.fraction != 1.0:
        store = DS.subsample(store, args.fraction, args.subsample_seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    DS.save_store(store, out)
    size = out.stat().st_size
    print(f"built datastore over split {args.split!r}: M={store.size}, "
          f"d={store.dim}, T_f={store.horizon}")
    print(f"build seconds {build_s:.2f}")
    print(f"store bytes {size}")
    print(f"sha256 {_sha256(out)}")
    if args.ivf_nlist:
        t0 = time.perf_counter()
        index = DS.build_ivf(store, n_list=args.ivf_nlist, seed=args.ivf_seed)
        sidecar = out.with_suffix(".kmtdx")
        DS.save_ivf(index, sidecar)
        print(f"ivf sidecar {sidecar} (n_list={args.ivf_nlist}, "
              f"{time.perf_counter() - t0:.2f}s)")
    return EXIT_OK


def _make_forecaster(run, params, cfg, normalizer, graph, store_path=None,
                     k=None, tau=None, alpha=None, index_kind=None,
                     ivf_path=None, n_probe=None, exclude_self=False):
    store = DS.load_store(store_path) if store_path else None
    fcfg = F.ForecastConfig(
        k=k or run.forecast.k,
        tau=tau if tau is not None else run.forecast.tau,
        alpha=alpha if alpha is not None else run.forecast.alpha,
        index=index_kind or run.forecast.index,
        n_probe=n_probe or run.forecast.n_probe,
        exclude_self=exclude_self)
    index = None
    if store is not None and fcfg.index == "ivf":
        sidecar = ivf_path or str(Path(store_path).with_suffix(".kmtdx"))
        index = DS.load_ivf(sidecar)
    return F.Forecaster(params=params, cfg=cfg, store=store,
                        normalizer=normalizer, fcfg=fcfg, graph=graph,
                        index=index)


def cmd_eval(args) -> int:
    run = _run_config(args)
    params, cfg = E.load_checkpoint(args.checkpoint)
    dataset, prepared, normalizer, graph = _load_pipeline(run)
    if cfg.use_graph and graph is None:
        raise ConfigError("checkpoint expects a predefined graph; pass --adjacency")
    split = prepared[args.split]
    if not args.no_store and not args.store:
        raise ConfigError("pass --store PATH or --no-store")
    fc = _make_forecaster(run, params, cfg, normalizer, graph,
                          store_path=None if args.no_store else args.store,
                          k=args.k, tau=args.tau, alpha=args.alpha,
                          index_kind=args.index, ivf_path=args.ivf,
                          n_probe=args.n_probe)
    out_dir = _write_run_dir(args.out_dir, run)

    with_store = fc.store is not None
    report, dump = fc.evaluate_split(split, with_store=with_store,
                                     batch_size=run.forecast.batch_size,
                                     null_value=run.data.null_value,
                                     per_node=args.per_node)
    _write_eval_csv(out_dir / "eval.csv", report)
    dump.write_csv(out_dir / "predictions.csv")
    label = "kNN-augmented" if with_store else "encoder-only"
    _print_report(f"{label} forecast on split {args.split!r} "
                  f"(K={fc.fcfg.k}, tau={fc.fcfg.tau}, alpha={fc.fcfg.alpha})"
                  if with_store else
                  f"{label} forecast on split {args.split!r}", report)
    print(f"encode seconds {dump.encode_seconds:.2f}")
    print(f"retrieve seconds {dump.retrieve_seconds:.2f}")
    print(f"throughput {dump.points_per_second_per_node():.1f} "
          "points/sec/node")

    if with_store and (args.k_grid or args.alpha_grid):
        sf = fc.encode_split(split, batch_size=run.forecast.batch_size)
        if args.k_grid:
            ks = _parse_grid(args.k_grid, integer=True)
            ids, dd = fc.retrieve(sf.queries, k=min(max(ks), fc.store.size))
            with open(out_dir / "kgrid.csv", "w") as f:
                f.write("k,mae,rmse,mape\n")
                for k in ks:
                    if k > fc.store.size:
                        continue
                    m = _grid_metrics(fc, sf, ids, dd, k=k)
                    f.write(f"{k},{_fmt(m.mae)},{_fmt(m.rmse)},{_fmt(m.mape)}\n")
            print(f"k grid -> {out_dir / 'kgrid.csv'}")
        if args.alpha_grid:
            alphas = _parse_grid(args.alpha_grid, integer=False)
            ids, dd = fc.retrieve(sf.queries)
            with open(out_dir / "alphagrid.csv", "w") as f:
                f.write("alpha,mae,rmse,mape\n")
                for alpha in alphas:
                    m = _grid_metrics(fc, sf, ids, dd, alpha=alpha)
                    f.write(f"{alpha},{_fmt(m.mae)},{_fmt(m.rmse)},"
                            f"{_fmt(m.mape)}\n")
            print(f"alpha grid -> {out_dir / 'alphagrid.csv'}")
    return EXIT_OK


def _grid_metrics(fc: F.Forecaster, sf, ids, dd, k=None, alpha=None) -> F.Metrics:
    final_norm = fc.combine(sf.model_out, ids, dd, k=k, alpha=alpha)
    c = fc.cfg.channels
    pred_raw = fc.normalizer.inverse(
        final_norm.reshape(-1, fc.cfg.horizon, c)).reshape(final_norm.shape)
    return F.masked_metrics(pred_raw, sf.labels_raw)


def cmd_inspect(args) -> int:
    run = _run_config(args)
    params, cfg = E.load_checkpoint(args.checkpoint)
    dataset, prepared, normalizer, graph = _load_pipeline(run)
    split = prepared[args.split]
    fc = _make_forecaster(run, params, cfg, normalizer, graph,
                          store_path=args.store, k=args.k,
                          exclude_self=args.exclude_self)

    local = args.end_step - split.offset
    lo = cfg.input_len - 1
    hi = split.n_steps - cfg.horizon - 1
    if not (lo <= local <= hi):
        raise ConfigError(
            f"--end-step {args.end_step} outside split {args.split!r} "
            f"(valid global range {split.offset + lo}..{split.offset + hi})")
    if not (0 <= args.node < dataset.n_nodes):
        raise ConfigError(f"--node {args.node} out of range")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fc.inspect_neighbors(split, args.node, args.end_step, args.out)
    print(f"neighbor dump -> {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
