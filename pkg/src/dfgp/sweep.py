"""MAE as a function of training-set size under Grid and Random sampling."""
from __future__ import annotations

import copy
from concurrent.futures import ProcessPoolExecutor

from .errors import InsufficientSamples
from .pipeline import PipelineConfig, get_variant, run_seed
from .raster_io import Dataset, Mask, RasterStack, normalize

DEFAULT_SIZES = (100, 200, 500, 1000, 2000, 5000)
SCENARIOS = ("grid", "random")
SWEEP_COLUMNS = ("variant", "scenario", "n_train", "seed", "mae", "rmse", "r2", "status")


def _cell(args) -> list[dict]:
    variants, dataset, mask, config, scenario, size, seed = args
    cfg = copy.deepcopy(config)
    cfg.split.scenario = scenario
    cfg.split.n_train = int(size)
    base = {"scenario": scenario, "n_train": int(size), "seed": int(seed)}
    try:
        outs = run_seed(variants, dataset, mask, cfg, seed)
    except InsufficientSamples:
        return [{"variant": v, **base, "mae": None, "rmse": None, "r2": None, "status": "skipped"}
                for v in variants]
    return [{"variant": o.variant, **base, "mae": o.metrics.mae, "rmse": o.metrics.rmse, "r2": o.metrics.r2,
             "status": "ok"} for o in outs]


def _cell_single_thread(args) -> list[dict]:
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        return _cell(args)


def sensitivity_sweep(variants: list[str], sizes, scenarios, seeds, stack: RasterStack, mask: Mask,
                      target: RasterStack, config: PipelineConfig | None = None,
                      threads: int = 1, dataset: Dataset | None = None) -> list[dict]:
    """One row per (variant, scenario, size, seed), in that nesting order
    (scenario outermost). Cells whose split cannot supply ``size`` pixels are
    recorded with status ``skipped``."""
    for v in variants:
        get_variant(v)
    for s in scenarios:
        if s not in SCENARIOS:
            raise ValueError(f"unknown scenario {s!r}; choose from {SCENARIOS}")
    config = config or PipelineConfig()
    dataset = dataset if dataset is not None else normalize(stack, mask, target)
    jobs = [(list(variants), dataset, mask, config, sc, n, sd) for sc in scenarios for n in sizes for sd in seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_cell_single_thread, jobs))
    else:
        cells = [_cell(j) for j in jobs]
    return [row for cell in cells for row in cell]
