"""Command-line interface: ``dfgp <command> [options]``.

A scene directory holds ``covariates.dfgp``, ``target.dfgp``, ``mask.dfgp``
and ``scene.json`` (pixel size and band names). Exit codes: 0 success,
1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import DataError, DfgpError, MissingExtractor, NumericalError
from .metrics import MetricReport
from .pipeline import (VARIANTS, ColumnState, PipelineConfig, assemble_variant, deep_features, fit_gp,
                       LinearModel, get_variant, load_regressor, make_split, predict_regressor,
                       prediction_field, run_experiment, save_regressor, train_extractor, variant_inputs)
from .raster_io import (MISSING, Mask, RasterStack, normalize, read_csv_scene, read_mask,
                        read_stack, write_mask, write_prediction, write_stack)
from .sweep import DEFAULT_SIZES, SWEEP_COLUMNS, sensitivity_sweep
from .synth import make_scene
from .wcrn import WcrnModel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESULT_COLUMNS = ("variant", "seed", "rmse", "mae", "r2", "runtime_s", "fingerprint")

log = logging.getLogger("dfgp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# scene directories


def save_scene(out_dir: Path, covariates: RasterStack, target: RasterStack, mask: Mask) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_stack(out_dir / "covariates.dfgp", covariates)
    write_stack(out_dir / "target.dfgp", target)
    write_mask(out_dir / "mask.dfgp", mask)
    meta = {"resolution_km": covariates.resolution_km, "names": list(covariates.names)}
    (out_dir / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_scene(path) -> tuple[RasterStack, RasterStack, Mask]:
    path = Path(path)
    if path.is_file():
        return read_csv_scene(path)
    meta_path = path / "scene.json"
    if not meta_path.exists():
        raise DataError(f"{path} is not a scene directory (scene.json missing)")
    meta = json.loads(meta_path.read_text())
    res = float(meta.get("resolution_km", 1.0))
    cov = read_stack(path / "covariates.dfgp", res)
    cov.names = list(meta.get("names", []))
    return cov, read_stack(path / "target.dfgp", res), read_mask(path / "mask.dfgp")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(a, config):
    cov, tgt, mask = make_scene(seed=a.seed, size=a.size, n_features=a.n_features, resolution_km=a.resolution_km)
    save_scene(a.out_dir, cov, tgt, mask)
    print(f"wrote synthetic scene to {a.out_dir}")


def cmd_ingest(a, config):
    cov, tgt, mask = read_csv_scene(a.csv, a.resolution_km)
    save_scene(a.out_dir, cov, tgt, mask)
    print(f"ingested {a.csv} into {a.out_dir}")


def _training(a, config):
    cov, tgt, mask = load_scene(a.data)
    ds = normalize(cov, mask, tgt)
    train, test = make_split(mask, config.split, a.seed)
    return ds, mask, ds.rows_of(train), test


def cmd_train_cnn(a, config):
    ds, _, train_rows, _ = _training(a, config)
    model, trace = train_extractor(ds, train_rows, config.cnn, a.seed)
    a.out_dir.mkdir(parents=True, exist_ok=True)
    model.save(a.out_dir / "cnn.dfgm", {"seed": a.seed, "schedule": config.cnn.schedule})
    _write_csv(a.out_dir / "cnn_loss.csv", ("epoch", "loss"),
               [{"epoch": i + 1, "loss": float(v)} for i, v in enumerate(trace)])
    print(f"trained CNN on {train_rows.size} pixels; final loss {trace[-1]:.6g}")


def _load_cnn(path):
    if path is None:
        raise MissingExtractor("this variant needs --cnn pointing to a trained CNN")
    return WcrnModel.load(path)[0]


def cmd_extract_features(a, config):
    cov, tgt, mask = load_scene(a.data)
    ds = normalize(cov, mask, tgt)
    model = _load_cnn(a.cnn)
    feats, preds = deep_features(model, ds, np.arange(ds.pixels.size))
    h, w = ds.shape
    out = np.full((h * w, feats.shape[1]), np.nan, dtype=np.float32)
    out[ds.pixels] = feats
    a.out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"deep{i + 1}" for i in range(feats.shape[1])]
    write_stack(a.out_dir / "features.dfgp", RasterStack(out.reshape(h, w, -1), ds.resolution_km, names))
    print(f"extracted {feats.shape[1]} features for {ds.pixels.size} pixels")


def cmd_train_gp(a, config):
    spec = get_variant(a.variant)
    if spec.name == "CNN":
        raise UsageError("the CNN variant has no regression stage; use train-cnn")
    ds, _, train_rows, _ = _training(a, config)
    extractor = _load_cnn(a.cnn) if spec.deep else None
    y = ds.targets[train_rows]
    empty = np.zeros(0, dtype=np.int64)
    if spec.uses_gp:
        asm = assemble_variant(spec, ds, train_rows, empty, extractor, mean_kind=config.gp.mean)
        model, trace = fit_gp(spec, asm, y, config.gp, ds.resolution_km, a.seed)
        label = "objective"
    else:
        asm = assemble_variant(spec, ds, train_rows, empty, extractor)
        model = LinearModel.fit(asm.mean_train, y)
        trace = []
    a.out_dir.mkdir(parents=True, exist_ok=True)
    save_regressor(a.out_dir / "gp.dfgm", spec.name, config, a.seed, asm.columns, model)
    if spec.uses_gp:
        _write_csv(a.out_dir / "gp_trace.csv", ("epoch", label),
                   [{"epoch": i + 1, label: float(v)} for i, v in enumerate(trace)])
    print(f"fitted {spec.name} on {train_rows.size} pixels")


def cmd_predict(a, config):
    cov, tgt, mask = load_scene(a.data)
    ds = normalize(cov, mask, tgt)
    header, model = load_regressor(a.model)
    spec = get_variant(header["variant"])
    saved = PipelineConfig.from_dict(header["config"])
    columns = ColumnState.from_dict(header["columns"])
    query = np.flatnonzero(ds.labels == MISSING)
    if spec.deep:
        feats = deep_features(_load_cnn(a.cnn), ds, query)[0]
    else:
        feats = ds.features[query]
    xm, xc = variant_inputs(spec, feats, ds.coords[query], columns, saved.gp.mean if spec.uses_gp else "linear")
    mean_s, var_s = predict_regressor(model, xm, xc, saved.gp.predictive_noise)
    truth = ds.targets_raw[query]
    known = np.isfinite(truth)
    metrics = {}
    if known.any():
        metrics = MetricReport.compute(truth[known], ds.norm_state.unscale_target(mean_s)[known]).to_dict()
    fld = prediction_field(ds, query, mean_s, np.sqrt(var_s), metrics)
    write_prediction(a.out_dir, fld)
    print(f"predicted {query.size} Missing pixels with {spec.name}")


def cmd_evaluate(a, config):
    cov, tgt, mask = load_scene(a.data)
    pred = read_stack(a.prediction).values[:, :, 0].astype(np.float64).ravel()
    truth = tgt.values[:, :, 0].astype(np.float64).ravel()
    sel = (mask.labels.ravel() == MISSING) & np.isfinite(truth) & np.isfinite(pred) & ~cov.nodata.ravel()
    if not sel.any():
        raise DataError("no Missing pixels with both a reference and a prediction")
    report = MetricReport.compute(truth[sel], pred[sel])
    a.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(a.out_dir / "evaluation.json", report.to_dict())
    print(f"rmse={report.rmse:.6g} mae={report.mae:.6g} r2={report.r2:.6g} n={report.n_eval}")


def _variants(text: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    for v in names:
        get_variant(v)
    return names


def experiment_rows(results, timing: bool) -> list[dict]:
    """Per-seed rows followed by one summary row per variant.

    Summary metric cells read ``mean (std)``; std is left out for one run.
    """
    rows = []
    for name, res in results.items():
        for r in res.rows:
            rows.append({**r, "runtime_s": r["runtime_s"] if timing else None})
        cells = {}
        for k in ("rmse", "mae", "r2"):
            m, s = res.stat(k)
            cells[k] = repr(m) if len(res.rows) < 2 else f"{m!r} ({s!r})"
        rows.append({"variant": name, "seed": "summary", **cells,
                     "runtime_s": res.runtime_s if timing else None, "fingerprint": res.config_fingerprint})
    return rows


def cmd_experiment(a, config):
    cov, tgt, mask = load_scene(a.data)
    seeds = list(range(a.seed, a.seed + a.seeds))
    results, fields_ = run_experiment(_variants(a.variants), cov, mask, tgt, config, seeds, threads=a.threads)
    a.out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(a.out_dir / "results.csv", RESULT_COLUMNS, experiment_rows(results, a.timing))
    summary = {name: res.summary() for name, res in results.items()}
    _write_json(a.out_dir / "summary.json", summary)
    for name, fld in fields_.items():
        write_prediction(a.out_dir, fld, prefix=f"{name}_prediction")
    for name, s in summary.items():
        print(f"{name}: r2 {s['r2_mean']:.4f} rmse {s['rmse_mean']:.4g} mae {s['mae_mean']:.4g}")


def cmd_sweep(a, config):
    cov, tgt, mask = load_scene(a.data)
    sizes = [int(s) for s in a.sizes.split(",")] if a.sizes else list(DEFAULT_SIZES)
    scenarios = [s.strip().lower() for s in a.scenarios.split(",")]
    seeds = list(range(a.seed, a.seed + a.seeds))
    rows = sensitivity_sweep(_variants(a.variants), sizes, scenarios, seeds, cov, mask, tgt, config,
                             threads=a.threads)
    a.out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(a.out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
    done = sum(r["status"] == "ok" for r in rows)
    print(f"sweep: {done} ok, {len(rows) - done} skipped")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--config", type=Path, help="JSON pipeline configuration")
    common.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")

    p = _Parser(prog="dfgp", description="Deep-feature Gaussian process gap filling")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark scene")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--n-features", type=int, default=8)
    s.add_argument("--resolution-km", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="convert a CSV scene to binary rasters")
    s.add_argument("--csv", type=Path, required=True)
    s.add_argument("--resolution-km", type=float, default=1.0)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train-cnn", parents=[common], help="train the CNN feature extractor")
    s.add_argument("--data", type=Path, required=True, help="scene directory or CSV")
    s.set_defaults(func=cmd_train_cnn)

    s = sub.add_parser("extract-features", parents=[common], help="write deep features for every valid pixel")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--cnn", type=Path, required=True)
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("train-gp", parents=[common], help="fit the regression stage of a variant")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--variant", default="DFGPs", choices=sorted(VARIANTS))
    s.add_argument("--cnn", type=Path)
    s.set_defaults(func=cmd_train_gp)

    s = sub.add_parser("predict", parents=[common], help="fill the Missing pixels of a scene")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--cnn", type=Path)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="score a prediction raster on Missing pixels")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--prediction", type=Path, required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("experiment", parents=[common], help="run variants over several seeds")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--variants", default=",".join(VARIANTS))
    s.add_argument("--seeds", type=int, default=10, help="number of seeds, starting at --seed")
    s.add_argument("--timing", action="store_true", help="record wall-clock runtimes (not reproducible)")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("sweep", parents=[common], help="MAE against training-set size")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--variants", default="DFGPs")
    s.add_argument("--sizes", help="comma-separated sizes (default 100,200,500,1000,2000,5000)")
    s.add_argument("--scenarios", default="grid,random")
    s.add_argument("--seeds", type=int, default=5)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if a.threads < 1:
            raise UsageError("--threads must be at least 1")
        config = PipelineConfig.load(a.config) if a.config else PipelineConfig()
    except UsageError as exc:
        print(f"dfgp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"dfgp: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dfgp: cannot read config: {exc}", file=sys.stderr)
        return EXIT_DATA
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=1):
            a.func(a, config)
    except UsageError as exc:
        print(f"dfgp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"dfgp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DfgpError, OSError) as exc:
        print(f"dfgp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"dfgp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
