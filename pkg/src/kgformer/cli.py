"""Command-line harness: train, evaluate, compare, synth, inspect-graph.

Flags mirror config keys one-to-one; a ``--config`` file (``key = value``
lines) supplies defaults that explicit flags override. All randomness flows
from ``--seed`` through named sub-streams (see seeding module). Report
paths write delimited output (CSV/JSONL) and render the matching figures
next to it.

Exit codes: 0 success, 2 config/validation error, 3 training divergence.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import click
import numpy as np

from . import checkpoint as ckpt
from . import data as dat
from . import graph as kg
from . import plots
from . import synthetic as syn
from .embeddings import Freq, Reduce
from .errors import ConfigError, DivergenceError, KgformerError, ValidationError
from .model import Forecaster, ModelConfig, kge_parameter_delta
from .seeding import rng_for
from .training import TrainConfig, evaluate_metrics, train


@dataclass
class RunConfig:
    """Everything that identifies a training run."""

    data: str
    out: str
    pred_len: int
    graph: str | None = None
    use_kge: bool = False
    seq_len: int = 336
    label_len: int = 48
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 1
    d_ff: int = 128
    dropout: float = 0.05
    kge_reduce: str = "sum"
    split: str = "auto"
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    patience: int = 3
    seed: int = 0
    loss_reduction: str = "mean"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self, channels: int, freq: Freq) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_enc_layers=self.enc_layers,
            n_dec_layers=self.dec_layers,
            d_ff=self.d_ff,
            dropout=self.dropout,
            lookback=self.seq_len,
            label_len=self.label_len,
            horizon=self.pred_len,
            channels=channels,
            use_kge=self.use_kge,
            kge_reduce=Reduce(self.kge_reduce),
            freq=freq,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.epochs,
            patience=min(self.patience, self.epochs),
            seed=self.seed,
            loss_reduction=self.loss_reduction,
        )

    def scheme(self) -> dat.SplitScheme:
        if self.split == "auto":
            return dat.default_scheme_for(os.path.basename(self.data))
        if self.split == "ratio":
            return dat.SplitScheme.ratio()
        if self.split == "ett":
            return dat.SplitScheme.ett_months()
        raise ConfigError(f"unknown split scheme '{self.split}'")


# Arm-identity fields are excluded so that the compare arms of one
# experiment share a single hash and differ only in the use_kge flag.
_HASH_EXCLUDED = {"use_kge", "graph", "out"}


def config_hash(cfg: RunConfig) -> str:
    payload = {k: v for k, v in cfg.to_dict().items() if k not in _HASH_EXCLUDED}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _read_config_file(path: str) -> dict:
    """``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = val
    return values


_PRESETS = {
    "desk": {},
    # Common large baseline setup for the full benchmark protocol.
    "full": {"d_model": 512, "n_heads": 8, "d_ff": 2048, "dropout": 0.05},
}


_FIELD_CASTS = {
    "pred_len": int, "seq_len": int, "label_len": int, "d_model": int,
    "n_heads": int, "enc_layers": int, "dec_layers": int, "d_ff": int,
    "batch_size": int, "epochs": int, "patience": int, "seed": int,
    "dropout": float, "lr": float,
    "use_kge": lambda raw: str(raw).lower() in ("1", "true", "yes"),
}


def _build_run_config(ctx: click.Context, kwargs: dict) -> RunConfig:
    """Merge sources with precedence flags > config file > preset > defaults."""
    file_values = _read_config_file(kwargs["config"]) if kwargs.get("config") else {}
    preset = _PRESETS[kwargs.get("preset", "desk")]

    merged: dict = {}
    for f in dataclasses.fields(RunConfig):
        name = f.name
        src = ctx.get_parameter_source(name)
        if src is not None and src.name == "COMMANDLINE":
            merged[name] = kwargs[name]
        elif name in file_values:
            cast = _FIELD_CASTS.get(name, str)
            merged[name] = cast(file_values[name])
        elif name in preset:
            merged[name] = preset[name]
        else:
            merged[name] = kwargs[name]
    for required in ("data", "out", "pred_len"):
        if merged.get(required) is None:
            raise ConfigError(f"missing required option --{required.replace('_', '-')}")
    return RunConfig(**merged)


def _prepare_dataset(cfg: RunConfig):
    series = dat.load_csv(cfg.data)
    adjacency = None
    if cfg.use_kge:
        if not cfg.graph:
            raise ConfigError("use_kge requires --graph")
        spec = kg.parse_graph_file(cfg.graph)
        _, adj = kg.validate_against_dataset(spec, series.column_names)
        adjacency = adj.values
    scaler, train_p, val_p, test_p = dat.scaled_partitions(series, cfg.scheme(), cfg.seq_len)
    return series, adjacency, scaler, train_p, val_p, test_p


def _jsonl_record(dataset, horizon, use_kge, seed, epoch=None,
                  train_mse=None, val_mse=None, test_mse=None, test_mae=None) -> dict:
    return {
        "dataset": dataset,
        "horizon": horizon,
        "use_kge": use_kge,
        "seed": seed,
        "epoch": epoch,
        "train_mse": train_mse,
        "val_mse": val_mse,
        "test_mse": test_mse,
        "test_mae": test_mae,
    }


def _write_jsonl(path: str, records: list[dict]) -> None:
    payload = "".join(json.dumps(r) + "\n" for r in records)
    ckpt._atomic_write(path, payload.encode("utf-8"))


def _write_csv_rows(path: str, header: list[str], rows: list[list]) -> None:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    ckpt._atomic_write(path, buf.getvalue().encode("utf-8"))


def _dataset_name(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# ---------------------------------------------------------------------------
# click wiring
# ---------------------------------------------------------------------------


def _run_options(fn):
    # data/out/pred-len are required, but may arrive via --config; presence
    # is validated after the merge in _build_run_config.
    opts = [
        click.option("--data", type=click.Path(exists=True), default=None, help="dataset CSV"),
        click.option("--out", type=click.Path(), default=None, help="output directory"),
        click.option("--pred-len", type=int, default=None, help="forecast horizon H"),
        click.option("--graph", type=click.Path(exists=True), default=None, help="graph file"),
        click.option("--use-kge", is_flag=True, default=False, help="enable graph embeddings"),
        click.option("--seq-len", type=int, default=336, show_default=True),
        click.option("--label-len", type=int, default=48, show_default=True),
        click.option("--d-model", type=int, default=64, show_default=True),
        click.option("--n-heads", type=int, default=4, show_default=True),
        click.option("--enc-layers", type=int, default=2, show_default=True),
        click.option("--dec-layers", type=int, default=1, show_default=True),
        click.option("--d-ff", type=int, default=128, show_default=True),
        click.option("--dropout", type=float, default=0.05, show_default=True),
        click.option("--kge-reduce", type=click.Choice(["sum", "mean"]), default="sum"),
        click.option("--split", type=click.Choice(["auto", "ratio", "ett"]), default="auto"),
        click.option("--lr", type=float, default=1e-4, show_default=True),
        click.option("--batch-size", type=int, default=32, show_default=True),
        click.option("--epochs", type=int, default=10, show_default=True),
        click.option("--patience", type=int, default=3, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--loss-reduction", type=click.Choice(["mean", "channel_sum"]), default="mean"),
        click.option("--config", type=click.Path(exists=True), default=None,
                     help="config file (key = value); flags take precedence"),
        click.option("--preset", type=click.Choice(sorted(_PRESETS)), default="desk",
                     help="named model-size preset"),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@click.group()
def cli():
    """Knowledge-graph-enhanced forecasting harness."""


@cli.command("train")
@_run_options
@click.option("--plots/--no-plots", "render_plots", default=True, show_default=True)
@click.pass_context
def cmd_train(ctx: click.Context, render_plots: bool, **kwargs):
    """Train one model; writes checkpoint, config snapshot and history."""
    cfg = _build_run_config(ctx, kwargs)
    name = _dataset_name(cfg.data)
    series, adjacency, _, train_p, val_p, test_p = _prepare_dataset(cfg)
    mc = cfg.model_config(series.channels, series.freq)
    model = Forecaster(mc, adjacency=adjacency, seed=cfg.seed)
    chash = config_hash(cfg)

    os.makedirs(cfg.out, exist_ok=True)
    ds_train = dat.WindowDataset(train_p, mc.lookback, mc.label_len, mc.horizon)
    ds_val = dat.WindowDataset(val_p, mc.lookback, mc.label_len, mc.horizon)
    ds_test = dat.WindowDataset(test_p, mc.lookback, mc.label_len, mc.horizon)

    records: list[dict] = []

    def log(epoch, train_mse, val_mse):
        records.append(_jsonl_record(name, cfg.pred_len, cfg.use_kge, cfg.seed,
                                     epoch=epoch, train_mse=train_mse, val_mse=val_mse))
        click.echo(f"epoch {epoch}: train_mse={train_mse:.5f} val_mse={val_mse:.5f}")

    history = train(model, ds_train, ds_val, cfg.train_config(), log=log)
    test_mse, test_mae = evaluate_metrics(model, ds_test, cfg.batch_size)
    records.append(_jsonl_record(name, cfg.pred_len, cfg.use_kge, cfg.seed,
                                 test_mse=test_mse, test_mae=test_mae))

    snapshot = {"config": cfg.to_dict(), "config_hash": chash,
                "channels": series.channels, "freq": series.freq.value,
                "columns": series.column_names, "n_params": model.parameter_count()}
    ckpt._atomic_write(os.path.join(cfg.out, "config.json"),
                       json.dumps(snapshot, indent=2, sort_keys=True).encode())
    _write_jsonl(os.path.join(cfg.out, "history.jsonl"), records)
    ckpt.save_checkpoint(os.path.join(cfg.out, "checkpoint"), model, snapshot, chash)
    if render_plots:
        plots.plot_history(history, os.path.join(cfg.out, "history.png"))
    click.echo(f"test_mse={test_mse:.5f} test_mae={test_mae:.5f} "
               f"(config {chash}, best epoch {history.best_epoch})")


@cli.command("evaluate")
@click.option("--checkpoint", "checkpoint_dir", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="output dir (default: checkpoint parent)")
@click.option("--dump-predictions", is_flag=True, default=False,
              help="write per-(timestamp, channel) truth/prediction CSV")
@click.option("--scale", type=click.Choice(["standardized", "raw"]), default="standardized",
              show_default=True, help="scale for metrics and dumps")
@click.option("--expect-hash", default=None, help="refuse checkpoints with a different config hash")
@click.option("--force", is_flag=True, default=False, help="load despite a config-hash mismatch")
@click.option("--plots/--no-plots", "render_plots", default=True, show_default=True)
def cmd_evaluate(checkpoint_dir, data, out, dump_predictions, scale, expect_hash, force, render_plots):
    """Evaluate a checkpoint on a dataset's test partition."""
    manifest = ckpt.read_manifest(checkpoint_dir)
    if expect_hash is not None and manifest["config_hash"] != expect_hash and not force:
        raise ValidationError(
            f"checkpoint config hash {manifest['config_hash']} != expected {expect_hash}; "
            "use --force to override"
        )
    snapshot = manifest["config"]
    cfg = RunConfig(**snapshot["config"])
    series = dat.load_csv(data)
    if series.channels != snapshot["channels"]:
        raise ValidationError(
            f"channel mismatch: checkpoint expects M={snapshot['channels']}, "
            f"dataset has M={series.channels}"
        )
    if series.freq.value != snapshot["freq"]:
        raise ValidationError(
            f"frequency mismatch: checkpoint expects {snapshot['freq']}, "
            f"dataset is {series.freq.value}"
        )
    mc = cfg.model_config(series.channels, series.freq)
    adjacency = np.asarray(manifest["adjacency"]) if manifest["adjacency"] is not None else None
    model = Forecaster(mc, adjacency=adjacency, seed=cfg.seed)
    ckpt.load_checkpoint(checkpoint_dir, model, expected_hash=expect_hash, force=force)

    scaler, _, _, test_p = dat.scaled_partitions(series, cfg.scheme(), cfg.seq_len)
    ds_test = dat.WindowDataset(test_p, mc.lookback, mc.label_len, mc.horizon)
    out_dir = out or os.path.dirname(os.path.abspath(checkpoint_dir))
    os.makedirs(out_dir, exist_ok=True)

    name = _dataset_name(data)
    if scale == "standardized":
        mse_val, mae_val = evaluate_metrics(model, ds_test, cfg.batch_size)
    else:
        mse_val, mae_val = _raw_scale_metrics(model, ds_test, scaler, cfg.batch_size)
    record = _jsonl_record(name, cfg.pred_len, cfg.use_kge, cfg.seed,
                           test_mse=mse_val, test_mae=mae_val)
    record["scale"] = scale
    ckpt._atomic_write(os.path.join(out_dir, "metrics.json"),
                       json.dumps(record, indent=2).encode())
    click.echo(json.dumps(record))

    if dump_predictions or render_plots:
        _dump_predictions(model, ds_test, series.column_names, scaler, scale,
                          out_dir, dump_predictions, render_plots, cfg.batch_size)


def _raw_scale_metrics(model, ds, scaler, batch_size):
    sq = 0.0
    ab = 0.0
    n = 0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        x_enc, x_dec, me, md, y = ds.batch(idx)
        pred = model.forecast(x_enc, me, x_dec, md, training=False).numpy()
        diff = scaler.invert(pred).astype(np.float64) - scaler.invert(y).astype(np.float64)
        sq += float(np.sum(diff * diff))
        ab += float(np.sum(np.abs(diff)))
        n += diff.size
    return sq / n, ab / n


def _dump_predictions(model, ds, columns, scaler, scale, out_dir, write_csv, render_plots, batch_size):
    rows = []
    first_truth = first_pred = first_ts = None
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        x_enc, x_dec, me, md, y = ds.batch(idx)
        pred = model.forecast(x_enc, me, x_dec, md, training=False).numpy()
        if scale == "raw":
            pred = scaler.invert(pred)
            y = scaler.invert(y)
        for b, w in enumerate(idx):
            stamps = ds.target_timestamps(int(w))
            if first_truth is None:
                first_truth, first_pred, first_ts = y[b], pred[b], stamps
            if write_csv:
                for h, ts in enumerate(stamps):
                    iso = ts.strftime("%Y-%m-%d %H:%M:%S")
                    for c, col in enumerate(columns):
                        rows.append([iso, col, repr(float(y[b, h, c])), repr(float(pred[b, h, c]))])
    if write_csv:
        _write_csv_rows(os.path.join(out_dir, "predictions.csv"),
                        ["timestamp", "channel", "truth", "prediction"], rows)
    if render_plots and first_truth is not None:
        plots.plot_forecast(first_ts, first_truth, first_pred, columns,
                            os.path.join(out_dir, "forecast.png"))


@cli.command("compare")
@_run_options
@click.option("--seeds", default="0", show_default=True, help="comma-separated training seeds")
@click.option("--placebo/--no-placebo", default=False, show_default=True,
              help="add a scrambled-graph arm")
@click.option("--plots/--no-plots", "render_plots", default=True, show_default=True)
@click.pass_context
def cmd_compare(ctx: click.Context, seeds: str, placebo: bool, render_plots: bool, **kwargs):
    """A/B arms {no-KGE, KGE} (optionally scrambled placebo) over seeds."""
    cfg = _build_run_config(ctx, kwargs)
    if not cfg.graph:
        raise ConfigError("compare requires --graph")
    seed_list = _parse_seeds(seeds)
    name = _dataset_name(cfg.data)

    series = dat.load_csv(cfg.data)
    spec = kg.parse_graph_file(cfg.graph)
    _, adj = kg.validate_against_dataset(spec, series.column_names)
    scheme = cfg.scheme()
    parts = dat.scaled_partitions(series, scheme, cfg.seq_len)
    mc_base = cfg.model_config(series.channels, series.freq)
    tc = cfg.train_config()
    chash = config_hash(cfg)

    arms: list[tuple[str, np.ndarray | None]] = [
        (syn.ARM_NO_KGE, None),
        (syn.ARM_TRUE, adj.values),
    ]
    if placebo:
        scram = kg.scrambled_adjacency(adj, rng_for(cfg.seed, "placebo_graph"))
        arms.append((syn.ARM_PLACEBO, scram.values))

    rows = []
    for seed in seed_list:
        for arm, adjacency in arms:
            result = syn.train_arm(arm, parts, mc_base, tc, adjacency, seed)
            rows.append(result)
            click.echo(f"{arm} seed={seed}: mse={result.mse:.5f} mae={result.mae:.5f}")
    report = syn.AbReport(rows=rows, horizon=cfg.pred_len, dataset=name,
                          arms=[a for a, _ in arms])
    _emit_compare_report(report, cfg, chash, adj.num_nodes, mc_base, render_plots)


def _parse_seeds(seeds: str) -> list[int]:
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad --seeds value '{seeds}'") from None
    if not seed_list:
        raise ConfigError("at least one seed is required")
    return seed_list


def _emit_compare_report(report: syn.AbReport, cfg: RunConfig, chash: str,
                         num_nodes: int, mc_base: ModelConfig, render_plots: bool) -> None:
    # Parameter accounting: the graph embedding must add exactly its two
    # factor matrices and nothing else.
    by_arm = {arm: [r for r in report.rows if r.arm == arm] for arm in report.arms}
    base_params = by_arm[syn.ARM_NO_KGE][0].n_params
    expected = base_params + kge_parameter_delta(mc_base, num_nodes)
    for arm in report.arms:
        if arm == syn.ARM_NO_KGE:
            continue
        got = by_arm[arm][0].n_params
        if got != expected:
            raise ValidationError(
                f"parameter accounting failed for arm {arm}: "
                f"expected {expected}, got {got}"
            )

    os.makedirs(cfg.out, exist_ok=True)
    _write_csv_rows(
        os.path.join(cfg.out, "report.csv"),
        ["arm", "seed", "mse", "mae", "n_params", "epochs_run", "config_hash"],
        [[r.arm, r.seed, repr(r.mse), repr(r.mae), r.n_params, r.epochs_run, chash]
         for r in report.rows],
    )
    summary = report.summary_rows()
    _write_csv_rows(
        os.path.join(cfg.out, "summary.csv"),
        list(summary[0].keys()),
        [[row[k] if isinstance(row[k], str) else repr(row[k]) for k in summary[0]]
         for row in summary],
    )
    ckpt._atomic_write(
        os.path.join(cfg.out, "report.json"),
        json.dumps({"config_hash": chash, "dataset": report.dataset,
                    "horizon": report.horizon, "summary": summary,
                    "param_accounting": {"base": base_params, "with_kge": expected}},
                   indent=2).encode(),
    )
    if render_plots:
        plots.plot_ab_report(report, os.path.join(cfg.out, "mse_by_arm.png"))
    for row in summary:
        click.echo(
            f"{row['arm']}: mean_mse={row['mean_mse']:.5f} (+/- {row['std_mse']:.5f})"
        )


@cli.command("synth")
@click.option("--generator", type=click.Choice([g.value for g in syn.Generator]),
              default="var1", show_default=True)
@click.option("--channels", type=int, default=7, show_default=True)
@click.option("--length", type=int, default=8000, show_default=True)
@click.option("--noise-std", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def cmd_synth(generator, channels, length, noise_std, seed, out):
    """Generate a coupled synthetic dataset plus its true graph file."""
    coupling = syn.default_var_coupling(channels, seed)
    spec = syn.SyntheticSpec(
        channels=channels, length=length, coupling=coupling,
        noise_std=noise_std, generator=syn.Generator(generator), seed=seed,
    )
    series = syn.generate(spec)
    gspec = syn.coupling_graph(spec)
    os.makedirs(out, exist_ok=True)
    data_path = os.path.join(out, "data.csv")
    graph_path = os.path.join(out, "graph.txt")
    dat.write_csv(data_path, series)
    ckpt._atomic_write(graph_path, kg.serialize_graph(gspec).encode("utf-8"))
    ckpt._atomic_write(
        os.path.join(out, "spec.json"),
        json.dumps({"generator": generator, "channels": channels, "length": length,
                    "noise_std": noise_std, "seed": seed,
                    "coupling": coupling.tolist()}, indent=2).encode(),
    )
    click.echo(f"wrote {data_path} ({length} rows x {channels} channels) and {graph_path}")


@cli.command("inspect-graph")
@click.option("--graph", required=True, type=click.Path(exists=True))
@click.option("--data", type=click.Path(exists=True), default=None,
              help="validate node<->column mapping against this dataset")
def cmd_inspect_graph(graph, data):
    """Human-readable adjacency summary; nonzero exit on validation failure."""
    spec = kg.parse_graph_file(graph)
    adj = kg.to_adjacency(spec)
    click.echo(f"nodes: {spec.num_nodes}")
    click.echo(f"edges: {adj.num_edges} ({'directed' if spec.directed else 'undirected'},"
               f" self_loops={'on' if spec.self_loops else 'off'})")
    if adj.num_edges == 0:
        click.echo("warning: empty edge set; the graph embedding will be inert "
                   "(zero adjacency annihilates the graph stream)")
    out_deg = adj.values.sum(axis=1) - np.diag(adj.values)
    in_deg = adj.values.sum(axis=0) - np.diag(adj.values)
    click.echo(f"{'node':<16}{'out':>5}{'in':>5}")
    for i, node in enumerate(adj.node_order):
        click.echo(f"{node:<16}{int(out_deg[i]):>5}{int(in_deg[i]):>5}")
    if data:
        series = dat.load_csv(data)
        mapping, _ = kg.validate_against_dataset(spec, series.column_names)
        click.echo("channel mapping (dataset order):")
        for idx, node in mapping:
            click.echo(f"  channel {idx} <-> {node}")


def run(argv: list[str] | None = None) -> int:
    """Dispatch one CLI invocation; returns the process exit code."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.exceptions.Abort:
        return 2
    except DivergenceError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except KgformerError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
