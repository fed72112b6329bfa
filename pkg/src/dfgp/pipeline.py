"""Model variants (LR, GP, GPs, CNN, DFGP, DFGPs) and the gap-filling runs.

A variant decides which columns feed the GP mean and which feed its
covariance. Coordinates are (row, col) in km; every other covariance column
is standardized with training-set statistics so length-scale bounds keep
their physical meaning.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import InsufficientSamples, MissingExtractor, ShapeError, StateError
from .gp_exact import ExactGpModel, fit_map, mean_design, predict
from .kernels import KernelSpec, relax_bounds, spatial_bounds
from .metrics import MetricReport, summarize
from .numeric import Schedule, cho_solve, cholesky_jittered
from .raster_io import (MISSING, OBSERVED, Dataset, Mask, PredictionField, RasterStack, normalize,
                        split_grid_scenario, split_random_scenario)
from .serialize import load_model, save_model
from .svgp import SvgpConfig, SvgpModel, fit_svgp, predict_svgp
from .wcrn import WcrnConfig, WcrnModel, extract_features, train_cnn

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class CnnSettings:
    patch_size: int = 7
    width: int = 64
    batch_size: int = 32
    schedule: list = field(default_factory=lambda: [[100, 0.01], [50, 0.001]])
    dtype: str = "float32"


@dataclass
class GpSettings:
    solver: str = "svgp"
    num_inducing: int = 500
    batch_size: int = 1024
    schedule: list = field(default_factory=lambda: [[300, 0.01], [100, 0.001]])
    exact_schedule: list = field(default_factory=lambda: [[500, 0.01], [100, 0.001]])
    exact_cap: int = 10_000
    family: str = "Matern52"
    learn_inducing: bool = True
    ard: bool = False
    mean: str = "linear"
    bound_rule: str = "half_lower"
    spatial_bounds: list | None = None
    predictive_noise: bool = True


@dataclass
class SplitSettings:
    scenario: str = "all"
    n_train: int | None = None


@dataclass
class PipelineConfig:
    cnn: CnnSettings = field(default_factory=CnnSettings)
    gp: GpSettings = field(default_factory=GpSettings)
    split: SplitSettings = field(default_factory=SplitSettings)

    def __post_init__(self):
        if self.gp.solver not in ("svgp", "exact"):
            raise ValueError(f"unknown GP solver {self.gp.solver!r}")
        if self.gp.mean not in ("linear", "constant"):
            raise ValueError(f"unknown mean function {self.gp.mean!r}")
        if self.split.scenario not in ("all", "random", "grid"):
            raise ValueError(f"unknown split scenario {self.split.scenario!r}")
        if self.split.scenario != "all" and not self.split.n_train:
            raise ValueError("random and grid splits need n_train")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - {"cnn", "gp", "split"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(_from_dict(CnnSettings, d.get("cnn", {})), _from_dict(GpSettings, d.get("gp", {})),
                   _from_dict(SplitSettings, d.get("split", {})))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fingerprint(variant: str, seed: int, config: PipelineConfig) -> str:
    blob = json.dumps({"variant": variant, "seed": int(seed), "config": config.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# variants


@dataclass(frozen=True)
class VariantSpec:
    name: str
    feature_source: str
    mean_inputs: tuple[str, ...]
    cov_inputs: tuple[str, ...]
    bound_rule: str = "spatial"

    @property
    def uses_gp(self) -> bool:
        return bool(self.cov_inputs)

    @property
    def deep(self) -> bool:
        return self.feature_source == "deep"


VARIANTS = {
    "LR": VariantSpec("LR", "original", ("features",), ()),
    "GP": VariantSpec("GP", "original", ("features", "coords"), ("features", "coords"), "relaxed"),
    "GPs": VariantSpec("GPs", "original", ("features",), ("coords",), "spatial"),
    "CNN": VariantSpec("CNN", "deep", (), ()),
    "DFGP": VariantSpec("DFGP", "deep", ("features", "coords"), ("features", "coords"), "relaxed"),
    "DFGPs": VariantSpec("DFGPs", "deep", ("features",), ("coords",), "spatial"),
}


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass
class ColumnState:
    """Standardization of the mean and covariance input columns."""

    mean_mu: np.ndarray
    mean_sd: np.ndarray
    cov_mu: np.ndarray
    cov_sd: np.ndarray

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnState":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass
class Assembled:
    mean_train: np.ndarray
    cov_train: np.ndarray
    mean_query: np.ndarray
    cov_query: np.ndarray
    columns: ColumnState


def _blocks(parts: tuple[str, ...], feats: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate the requested blocks; returns the matrix and a mask of
    coordinate columns."""
    mats, is_coord = [], []
    for p in parts:
        m = feats if p == "features" else coords
        mats.append(m)
        is_coord.append(np.full(m.shape[1], p == "coords"))
    if not mats:
        return np.zeros((feats.shape[0], 0)), np.zeros(0, bool)
    return np.hstack(mats), np.concatenate(is_coord)


def _standardizer(x: np.ndarray, keep: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0) if x.shape[0] else np.zeros(x.shape[1])
    sd = x.std(axis=0) if x.shape[0] else np.ones(x.shape[1])
    sd = np.where(sd > 0, sd, 1.0)
    mu = np.where(keep, 0.0, mu)
    sd = np.where(keep, 1.0, sd)
    return mu, sd


def variant_inputs(spec: VariantSpec, feats: np.ndarray, coords: np.ndarray, columns: ColumnState,
                   mean_kind: str = "linear") -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance inputs for arbitrary rows given fitted column state."""
    mean_parts = spec.mean_inputs if mean_kind == "linear" else ()
    xm, _ = _blocks(mean_parts, feats, coords)
    xc, _ = _blocks(spec.cov_inputs, feats, coords)
    return (xm - columns.mean_mu) / columns.mean_sd, (xc - columns.cov_mu) / columns.cov_sd


def deep_features(extractor: WcrnModel, dataset: Dataset, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode deep features and CNN head predictions for dataset rows."""
    return extract_features(extractor, dataset.image, dataset.pixels[rows])


def assemble_variant(spec: VariantSpec, dataset: Dataset, train_rows: np.ndarray, query_rows: np.ndarray,
                     extractor: WcrnModel | None = None, deep: tuple[np.ndarray, np.ndarray] | None = None,
                     mean_kind: str = "linear") -> Assembled:
    """Build mean/covariance inputs for the training and query rows.

    For deep variants either ``extractor`` or precomputed ``deep`` features
    ``(train_feats, query_feats)`` must be supplied.
    """
    if spec.deep:
        if deep is None:
            if extractor is None:
                raise MissingExtractor(f"variant {spec.name} needs a trained feature extractor")
            deep = (deep_features(extractor, dataset, train_rows)[0],
                    deep_features(extractor, dataset, query_rows)[0])
        f_train, f_query = deep
    else:
        f_train, f_query = dataset.features[train_rows], dataset.features[query_rows]
    c_train, c_query = dataset.coords[train_rows], dataset.coords[query_rows]
    mean_parts = spec.mean_inputs if mean_kind == "linear" else ()
    xm, _ = _blocks(mean_parts, f_train, c_train)
    xc, coord_cols = _blocks(spec.cov_inputs, f_train, c_train)
    m_mu, m_sd = _standardizer(xm, np.zeros(xm.shape[1], bool))
    c_mu, c_sd = _standardizer(xc, coord_cols)
    columns = ColumnState(m_mu, m_sd, c_mu, c_sd)
    mq, cq = variant_inputs(spec, f_query, c_query, columns, mean_kind)
    return Assembled((xm - m_mu) / m_sd, (xc - c_mu) / c_sd, mq, cq, columns)


def fit_linear_regression(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares weights for the design matrix ``x`` (no implicit intercept)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != y.size:
        raise ShapeError("design matrix and targets disagree")
    if x.shape[0] <= x.shape[1]:
        raise InsufficientSamples(f"need more samples ({x.shape[0]}) than columns ({x.shape[1]})")
    l, jitter = cholesky_jittered(x.T @ x, jitter0=0.0)
    if jitter > 0:
        log.warning("normal equations rank deficient; regularized with jitter %.3g", jitter)
    return cho_solve(l, x.T @ y)


@dataclass
class LinearModel:
    """OLS weights on ``[1, mean inputs]`` and the training residual RMS."""

    weights: np.ndarray
    resid_sd: float

    @classmethod
    def fit(cls, x_mean: np.ndarray, y: np.ndarray) -> "LinearModel":
        h = mean_design(x_mean, y.size)
        w = fit_linear_regression(h, y)
        return cls(w, float(np.sqrt(np.mean((h @ w - y) ** 2))))

    def predict(self, x_mean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = mean_design(x_mean, x_mean.shape[0]) @ self.weights
        return mean, np.full(mean.shape, self.resid_sd ** 2)


def variant_bounds(spec: VariantSpec, resolution_km: float, gp: GpSettings) -> tuple[float, float]:
    base = tuple(gp.spatial_bounds) if gp.spatial_bounds else spatial_bounds(resolution_km)
    if spec.bound_rule == "relaxed":
        return relax_bounds(base, gp.bound_rule)
    return base


def fit_gp(spec: VariantSpec, asm: Assembled, y: np.ndarray, gp: GpSettings, resolution_km: float,
           seed: int):
    """Fit the variant's GP; returns ``(model, trace)``."""
    bounds = variant_bounds(spec, resolution_km, gp)
    xm = asm.mean_train if asm.mean_train.shape[1] else None
    n = y.size
    if gp.solver == "exact" and n <= gp.exact_cap:
        n_ls = asm.cov_train.shape[1] if gp.ard else 1
        var_y = float(np.var(y)) or 1e-4
        kernel = KernelSpec(gp.family, np.full(n_ls, np.sqrt(bounds[0] * bounds[1])), var_y, bounds)
        return fit_map(xm, asm.cov_train, y, kernel, bounds, Schedule.from_list(gp.exact_schedule), seed,
                       cap=gp.exact_cap)
    cfg = SvgpConfig(num_inducing=min(gp.num_inducing, n), batch_size=gp.batch_size, family=gp.family,
                     bounds=bounds, learn_inducing=gp.learn_inducing, ard=gp.ard)
    return fit_svgp(xm, asm.cov_train, y, cfg, Schedule.from_list(gp.schedule), seed)


def predict_gp(model, mean_query: np.ndarray, cov_query: np.ndarray, include_noise: bool):
    xm = mean_query if mean_query.shape[1] else None
    if isinstance(model, ExactGpModel):
        return predict(model, xm, cov_query, include_noise=include_noise)
    return predict_svgp(model, xm, cov_query, include_noise=include_noise)


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunOutput:
    variant: str
    seed: int
    metrics: MetricReport
    runtime_s: float
    fingerprint: str
    field: PredictionField
    pred_scaled: np.ndarray
    extractor: WcrnModel | None = None
    gp_model: object | None = None
    columns: ColumnState | None = None
    deep_query: np.ndarray | None = None

    def row(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "rmse": self.metrics.rmse,
                "mae": self.metrics.mae, "r2": self.metrics.r2, "runtime_s": self.runtime_s,
                "fingerprint": self.fingerprint}


@dataclass
class ExperimentResult:
    variant: str
    rows: list[dict]
    config_fingerprint: str

    def stat(self, key: str) -> tuple[float, float]:
        return summarize([r[key] for r in self.rows])

    @property
    def runtime_s(self) -> float:
        return float(sum(r["runtime_s"] for r in self.rows))

    def summary(self) -> dict:
        out = {"variant": self.variant, "runs": len(self.rows), "fingerprint": self.config_fingerprint}
        for k in ("rmse", "mae", "r2"):
            out[k + "_mean"], out[k + "_std"] = self.stat(k)
        return out


def make_split(mask: Mask, split: SplitSettings, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/test flat pixel indices for one seed."""
    if split.scenario == "random":
        return split_random_scenario(mask, split.n_train, seed)
    if split.scenario == "grid":
        train, test, _ = split_grid_scenario(mask, split.n_train, seed)
        return train, test
    return mask.flat(OBSERVED), mask.flat(MISSING)


def train_extractor(dataset: Dataset, train_rows: np.ndarray, cnn: CnnSettings, seed: int):
    cfg = WcrnConfig(in_channels=dataset.image.shape[2], patch_size=cnn.patch_size, width=cnn.width,
                     batch_size=cnn.batch_size, dtype=cnn.dtype)
    return train_cnn(dataset.image, dataset.pixels[train_rows], dataset.targets[train_rows], cfg,
                     Schedule.from_list(cnn.schedule), seed)


def prediction_field(dataset: Dataset, query_rows: np.ndarray, mean_s: np.ndarray, std_s: np.ndarray,
                      metrics: dict) -> PredictionField:
    h, w = dataset.shape
    norm = dataset.norm_state
    mean = np.full(h * w, np.nan)
    std = np.full(h * w, np.nan)
    obs = dataset.labels == OBSERVED
    mean[dataset.pixels[obs]] = dataset.targets_raw[obs]
    std[dataset.pixels[obs]] = 0.0
    mean[dataset.pixels[query_rows]] = norm.unscale_target(mean_s)
    std[dataset.pixels[query_rows]] = norm.unscale_std(std_s)
    labels = np.zeros(h * w, np.uint8)
    labels[dataset.pixels] = dataset.labels
    return PredictionField(mean.reshape(h, w), std.reshape(h, w), Mask(labels.reshape(h, w)), norm, metrics)


def run_single(spec: VariantSpec, dataset: Dataset, config: PipelineConfig, seed: int,
               train_pixels: np.ndarray, test_pixels: np.ndarray,
               extractor: WcrnModel | None = None) -> RunOutput:
    """Train (CNN if needed, then GP/LR), predict the test pixels and score
    them in original target units."""
    t0 = time.perf_counter()
    train_rows = dataset.rows_of(np.sort(train_pixels))
    test_pixels = np.asarray(test_pixels)
    test_pixels = np.sort(test_pixels[np.isin(test_pixels, dataset.pixels)])
    query_rows = dataset.rows_of(test_pixels)
    if np.intersect1d(train_rows, query_rows).size:
        raise ShapeError("training and test pixels overlap")
    y = dataset.targets[train_rows]
    deep = None
    deep_query = None
    if spec.deep:
        if extractor is None:
            extractor, _ = train_extractor(dataset, train_rows, config.cnn, seed)
        f_train, p_train = deep_features(extractor, dataset, train_rows)
        deep_query, p_query = deep_features(extractor, dataset, query_rows)
        deep = (f_train, deep_query)
    gp_model = None
    columns = None
    if spec.name == "CNN":
        mean_s = p_query
        std_s = np.full(query_rows.size, np.sqrt(np.mean((p_train - y) ** 2)))
    elif not spec.uses_gp:
        asm = assemble_variant(spec, dataset, train_rows, query_rows, deep=deep)
        columns = asm.columns
        gp_model = LinearModel.fit(asm.mean_train, y)
        mean_s, var_s = gp_model.predict(asm.mean_query)
        std_s = np.sqrt(var_s)
    else:
        asm = assemble_variant(spec, dataset, train_rows, query_rows, deep=deep, mean_kind=config.gp.mean)
        columns = asm.columns
        gp_model, _ = fit_gp(spec, asm, y, config.gp, dataset.resolution_km, seed)
        mean_s, var_s = predict_gp(gp_model, asm.mean_query, asm.cov_query, config.gp.predictive_noise)
        std_s = np.sqrt(var_s)
    runtime = time.perf_counter() - t0

    truth = dataset.targets_raw[query_rows]
    known = np.isfinite(truth)
    if not known.any():
        raise InsufficientSamples("no test pixels with known targets")
    pred = dataset.norm_state.unscale_target(mean_s)
    report = MetricReport.compute(truth[known], pred[known])
    fld = prediction_field(dataset, query_rows, mean_s, std_s, report.to_dict())
    return RunOutput(spec.name, int(seed), report, runtime, fingerprint(spec.name, seed, config), fld,
                     mean_s, extractor, gp_model, columns, deep_query)


def run_seed(variants: list[str], dataset: Dataset, mask: Mask, config: PipelineConfig,
             seed: int) -> list[RunOutput]:
    """All variants for one seed; deep variants share one extractor."""
    train, test = make_split(mask, config.split, seed)
    train_rows = dataset.rows_of(train[np.isin(train, dataset.pixels)])
    extractor = None
    outputs = []
    for name in variants:
        spec = get_variant(name)
        if spec.deep and extractor is None:
            t0 = time.perf_counter()
            extractor, _ = train_extractor(dataset, train_rows, config.cnn, seed)
            cnn_time = time.perf_counter() - t0
        out = run_single(spec, dataset, config, seed, dataset.pixels[train_rows], test, extractor)
        if spec.deep:
            out.runtime_s += cnn_time
        outputs.append(out)
    return outputs


def _run_seed_job(args):
    from threadpoolctl import threadpool_limits
    variants, dataset, mask, config, seed = args
    with threadpool_limits(limits=1):
        outs = run_seed(variants, dataset, mask, config, seed)
    for o in outs:
        o.extractor = None
    return outs


def run_experiment(variants: list[str], stack: RasterStack, mask: Mask, target: RasterStack,
                   config: PipelineConfig, seeds: list[int], threads: int = 1):
    """Run every variant for every seed.

    Returns ``(results, fields)``: an :class:`ExperimentResult` per variant and
    the prediction field of the first seed per variant. Seeds are independent
    and may run in ``threads`` worker processes.
    """
    for name in variants:
        get_variant(name)
    dataset = normalize(stack, mask, target)
    if threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            per_seed = list(pool.map(_run_seed_job, [(variants, dataset, mask, config, s) for s in seeds]))
    else:
        per_seed = [run_seed(variants, dataset, mask, config, s) for s in seeds]
    cfg_fp = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    results, fields_ = {}, {}
    for i, name in enumerate(variants):
        outs = [seed_outs[i] for seed_outs in per_seed]
        results[name] = ExperimentResult(name, [o.row() for o in outs], cfg_fp)
        fields_[name] = outs[0].field
    return results, fields_


def run_variant(spec: VariantSpec | str, stack: RasterStack, mask: Mask, target: RasterStack,
                config: PipelineConfig, seeds: list[int]):
    """One variant over several seeds; returns ``(ExperimentResult, PredictionField)``."""
    name = spec if isinstance(spec, str) else spec.name
    results, fields_ = run_experiment([name], stack, mask, target, config, seeds)
    return results[name], fields_[name]


# ---------------------------------------------------------------------------
# persistence of fitted regression stages


def save_regressor(path, variant: str, config: PipelineConfig, seed: int, columns: ColumnState, model) -> None:
    """Save the LR weights or GP model of a variant with its column state."""
    header = {"variant": variant, "config": config.to_dict(), "seed": int(seed), "columns": columns.to_dict()}
    if isinstance(model, ExactGpModel):
        header["model"] = model.to_header()
        arrays = {"beta": model.beta, "x_cov": model.x_cov, "y": model.y}
        if model.x_mean is not None:
            arrays["x_mean"] = model.x_mean
    elif isinstance(model, SvgpModel):
        header["model"] = model.to_header()
        arrays = model.arrays()
    else:
        header["model"] = {"kind": "lr", "resid_sd": model.resid_sd}
        arrays = {"beta": model.weights}
    save_model(path, header, arrays)


def load_regressor(path):
    """Returns ``(header, model)`` where model is weights, ExactGpModel or SvgpModel."""
    header, arrays = load_model(path)
    kind = header.get("model", {}).get("kind")
    if kind == "lr":
        model = LinearModel(arrays["beta"], float(header["model"]["resid_sd"]))
    elif kind == "svgp":
        model = SvgpModel.from_saved(header["model"], arrays)
    elif kind == "exact":
        h = header["model"]
        model = ExactGpModel(KernelSpec.from_dict(h["kernel"]), arrays["beta"], float(h["noise"]))
        model.condition(arrays.get("x_mean"), arrays["x_cov"], arrays["y"])
    else:
        raise StateError(f"{path} does not hold a regression model")
    return header, model


def predict_regressor(model, mean_query: np.ndarray, cov_query: np.ndarray, include_noise: bool):
    """Predictive mean and variance at query inputs."""
    if isinstance(model, LinearModel):
        return model.predict(mean_query)
    return predict_gp(model, mean_query, cov_query, include_noise)
