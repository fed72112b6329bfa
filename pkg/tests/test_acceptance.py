"""Acceptance criteria. Each test records one PASS/FAIL line that is echoed
in the terminal summary and printed immediately (visible with ``-s``)."""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, tiny_config

from dfgp.cli import load_scene, main
from dfgp.gp_exact import ExactGpModel, fit_map, log_marginal, mean_design, predict
from dfgp.kernels import FAMILIES, KernelSpec, gram, kernel_value
from dfgp.numeric import Schedule, cholesky_jittered
from dfgp.pipeline import CnnSettings, GpSettings, PipelineConfig, SplitSettings, run_experiment
from dfgp.svgp import SvgpConfig, SvgpModel, elbo_minibatch, fit_svgp, predict_svgp
from dfgp.sweep import sensitivity_sweep
from dfgp.synth import make_scene
from dfgp.wcrn import PARAM_ORDER, WcrnConfig, WcrnModel, backward, forward, l1_loss

# reduced CNN and inducing budget so the end-to-end benchmark fits a desk CPU
BENCHMARK = PipelineConfig(CnnSettings(width=4, schedule=[[40, 0.01], [20, 0.001]]),
                           GpSettings(num_inducing=200), SplitSettings("random", 2000))


def record(number, title, ok, detail, status=None):
    line = f"criterion {number} {title}: {status or ('PASS' if ok else 'FAIL')} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def _central(f, x, h):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        dn = f()
        x[idx] = orig
        grad[idx] = (up - dn) / (2 * h)
    return grad


def _rel_err(analytic, fd):
    return float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-8))


def test_criterion_1_variational_matches_exact():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 20, size=(200, 2))
    k = gram(KernelSpec("Matern52", [4.0], 1.0), x) + 1e-8 * np.eye(200)
    y = 0.5 + 0.12 * np.linalg.cholesky(k) @ rng.normal(size=200) + 0.01 * rng.normal(size=200)
    exact, _ = fit_map(None, x, y, bounds=(1.0, 30.0))
    cfg = SvgpConfig(num_inducing=200, learn_inducing=False, bounds=(1.0, 30.0))
    svgp, _ = fit_svgp(None, x, y, cfg, Schedule([(300, 0.01), (100, 0.001)]), seed=0, z_init=x)
    xs = rng.uniform(0, 20, size=(500, 2))
    rms = float(np.sqrt(np.mean((predict(exact, None, xs)[0] - predict_svgp(svgp, None, xs)[0]) ** 2)))
    twin = ExactGpModel(KernelSpec.from_dict(svgp.kernel.to_dict()), svgp.beta.copy(), svgp.noise)
    gap = log_marginal(twin, None, x, y) - elbo_minibatch(svgp, None, x, y, 200)
    elapsed = time.perf_counter() - t0
    ok = rms < 0.05 and gap >= -1e-8 and elapsed < 120
    assert record(1, "SVGP vs exact GP", ok, f"rms {rms:.4f}, log-marginal minus ELBO {gap:.3g}, {elapsed:.0f}s")


def _cnn_gradient_error():
    model = WcrnModel.init(WcrnConfig(in_channels=2, width=3, dtype="float64"), 0)
    rng = np.random.default_rng(100)
    for k in model.params:
        model.params[k] = model.params[k] + 0.1 * rng.normal(size=model.params[k].shape)
    x = np.random.default_rng(1).normal(size=(2, 7, 7, 2))
    y = np.array([0.2, 0.9])
    _, _, cache = forward(model, x, train=True)
    grads = backward(model, y, cache)

    def loss():
        return l1_loss(forward(model.copy(), x, train=True)[1], y)

    return max(_rel_err(grads[k], _central(loss, model.params[k], 1e-4)) for k in PARAM_ORDER)


def _svgp_gradient_error():
    worst = 0.0
    for family in FAMILIES:
        rng = np.random.default_rng(17)
        xc, xm, y = rng.normal(size=(12, 2)), rng.normal(size=(12, 3)), rng.normal(size=12)
        q = np.tril(rng.normal(size=(3, 3)) * 0.3, -1) + np.diag(rng.uniform(0.4, 1.2, 3))
        model = SvgpModel(KernelSpec(family, rng.uniform(0.6, 1.6, 2), 1.1, (1e-3, 1e3)), rng.normal(size=4),
                          0.2, rng.normal(size=(3, 2)), rng.normal(size=3), q)
        _, grads = elbo_minibatch(model, xm, xc, y, 30, return_grad=True)
        params = model.params()

        def elbo():
            model.set_params(params)
            return elbo_minibatch(model, xm, xc, y, 30)

        for name, arr in params.items():
            fd = _central(elbo, arr, 1e-5)
            if name == "q_lower":
                keep = np.tril(np.ones_like(arr, bool), -1)
                worst = max(worst, _rel_err(grads[name][keep], fd[keep]))
            else:
                worst = max(worst, _rel_err(grads[name], fd))
        model.set_params(params)
    return worst


def _exact_gradient_error():
    worst = 0.0
    rng = np.random.default_rng(3)
    xm, xc, y = rng.normal(size=(12, 3)), rng.uniform(0, 5, size=(12, 2)), rng.normal(size=12)
    for family in FAMILIES:
        model = ExactGpModel(KernelSpec(family, [1.2], 0.8), rng.normal(size=4), 0.1)
        _, grads = log_marginal(model, xm, xc, y, return_grad=True)
        logs = {"log_lengthscale": np.log(model.kernel.lengthscale), "log_outputscale": np.log([model.kernel.outputscale]),
                "log_noise": np.log([model.noise]), "beta": model.beta}

        def value():
            m = ExactGpModel(KernelSpec(family, np.exp(logs["log_lengthscale"]), float(np.exp(logs["log_outputscale"][0]))),
                             logs["beta"], float(np.exp(logs["log_noise"][0])))
            return log_marginal(m, xm, xc, y)

        for name, arr in logs.items():
            worst = max(worst, _rel_err(np.atleast_1d(grads[name]), _central(value, arr, 1e-5)))
    return worst


def test_criterion_2_gradient_suites():
    t0 = time.perf_counter()
    errs = {"cnn": _cnn_gradient_error(), "elbo": _svgp_gradient_error(), "exact": _exact_gradient_error()}
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert record(2, "finite-difference gradients", ok, f"max rel err {detail}, {elapsed:.1f}s")


def test_criterion_3_kernel_identities():
    rng = np.random.default_rng(11)
    m12 = max(abs(kernel_value(KernelSpec("Matern12", [ls], 1.0, (1e-3, 1e3)), [0.0], [d]) - np.exp(-d / ls))
              for d, ls in zip(rng.uniform(0, 10, 100), rng.uniform(0.05, 5, 100)))
    zero = all(kernel_value(KernelSpec(f, [0.7], 2.5), [0.3, 1.0], [0.3, 1.0]) == 2.5 for f in FAMILIES)
    chol_ok = 0
    for i in range(50):
        xs = rng.normal(size=(50, 3))
        spec = KernelSpec(FAMILIES[i % 4], [rng.uniform(0.2, 3.0)], rng.uniform(0.1, 3.0))
        l, _ = cholesky_jittered(gram(spec, xs) + 1e-6 * np.eye(50), jitter0=0.0)
        chol_ok += bool(np.all(np.isfinite(l)))
    ok = m12 < 1e-14 and zero and chol_ok == 50
    assert record(3, "kernel identities", ok, f"Matern12 max err {m12:.1e}, zero-distance exact {zero}, "
                                              f"Cholesky {chol_ok}/50")


def test_criterion_4_exact_closed_form():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 11))
        xm, xc, y = rng.normal(size=(n, 2)), rng.uniform(0, 5, size=(n, 2)), rng.normal(size=n)
        model = ExactGpModel(KernelSpec(FAMILIES[seed % 4], [rng.uniform(0.5, 2)], rng.uniform(0.5, 2)),
                             rng.normal(size=3), rng.uniform(0.05, 0.5)).condition(xm, xc, y)
        xm_s, xc_s = rng.normal(size=(6, 2)), rng.uniform(0, 5, size=(6, 2))
        k_inv = np.linalg.inv(gram(model.kernel, xc) + model.noise * np.eye(n))
        ks = gram(model.kernel, xc_s, xc)
        mu_d = mean_design(xm_s, 6) @ model.beta + ks @ k_inv @ (y - mean_design(xm, n) @ model.beta)
        var_d = model.kernel.outputscale - np.einsum("ij,jk,ik->i", ks, k_inv, ks)
        mu, var = predict(model, xm_s, xc_s)
        worst = max(worst, np.max(np.abs(mu - mu_d)), np.max(np.abs(var - var_d)))
    rng = np.random.default_rng(4)
    xm, xc, y = rng.normal(size=(10, 2)), rng.uniform(0, 5, size=(10, 2)), rng.normal(size=10)
    interp = ExactGpModel(KernelSpec("Matern52", [1.0], 1.0), rng.normal(size=3), 1e-12).condition(xm, xc, y)
    recovered = float(np.max(np.abs(predict(interp, xm, xc)[0] - y)))
    ok = worst < 1e-8 and recovered < 1e-5
    assert record(4, "exact GP closed form", ok, f"oracle max diff {worst:.1e}, interpolation err {recovered:.1e}")


@pytest.mark.slow
def test_criterion_5_synthetic_ordering():
    t0 = time.perf_counter()
    stack, target, mask = make_scene(seed=0, size=64)
    variants = ["LR", "GP", "GPs", "CNN", "DFGP", "DFGPs"]
    results, _ = run_experiment(variants, stack, mask, target, BENCHMARK, seeds=list(range(5)))
    med = {v: float(np.median([r["r2"] for r in results[v].rows])) for v in variants}
    elapsed = time.perf_counter() - t0
    ok = (med["DFGP"] >= med["CNN"] + 0.02 and med["DFGPs"] >= med["CNN"] + 0.02
          and all(med[v] > med["LR"] for v in variants if v != "LR") and elapsed < 1200)
    detail = ", ".join(f"{v} {r:.3f}" for v, r in med.items())
    assert record(5, "synthetic R2 ordering", ok, f"median R2 {detail}, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_6_modis_reproduction():
    root = os.environ.get("DFGP_MODIS_DIR")
    if not root:
        record(6, "MODIS reproduction", True, "DFGP_MODIS_DIR not set", status="SKIP")
        pytest.skip("DFGP_MODIS_DIR not set")
    stack, target, mask = load_scene(Path(root))
    results, _ = run_experiment(["CNN", "DFGPs"], stack, mask, target, PipelineConfig(), seeds=[0, 1, 2])
    dfgps = float(np.mean([r["r2"] for r in results["DFGPs"].rows]))
    cnn = float(np.mean([r["r2"] for r in results["CNN"].rows]))
    ok = dfgps >= 0.72 and 0.61 <= cnn <= 0.69
    assert record(6, "MODIS reproduction", ok, f"DFGPs R2 {dfgps:.4f}, CNN R2 {cnn:.4f}")


def _cli_round(root, out):
    data, cfg = root / "scene", root / "tiny.json"
    common = ["--config", str(cfg), "--seed", "3", "--threads", "1", "--out-dir", str(out)]
    calls = [["synth", "--size", "24", "--n-features", "4", "--seed", "3", "--out-dir", str(out / "synth")],
             ["train-cnn", "--data", str(data), *common],
             ["extract-features", "--data", str(data), "--cnn", str(out / "cnn.dfgm"), *common],
             ["train-gp", "--data", str(data), "--variant", "DFGP", "--cnn", str(out / "cnn.dfgm"), *common],
             ["predict", "--data", str(data), "--model", str(out / "gp.dfgm"), "--cnn", str(out / "cnn.dfgm"),
              *common],
             ["evaluate", "--data", str(data), "--prediction", str(out / "prediction_mean.dfgp"), *common],
             ["experiment", "--data", str(data), "--variants", "LR,GPs,CNN,DFGPs", "--seeds", "2",
              *common[:-2], "--out-dir", str(out / "experiment")],
             ["sweep", "--data", str(data), "--variants", "GPs", "--sizes", "60,120", "--seeds", "2",
              *common[:-2], "--out-dir", str(out / "sweep")]]
    for call in calls:
        assert main(call) == 0, call[0]
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_7_cli_determinism(tmp_path):
    assert main(["synth", "--size", "24", "--n-features", "4", "--out-dir", str(tmp_path / "scene")]) == 0
    (tmp_path / "tiny.json").write_text(json.dumps(tiny_config().to_dict()))
    first = _cli_round(tmp_path, tmp_path / "a")
    second = _cli_round(tmp_path, tmp_path / "b")
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = not differing and first.keys() == second.keys()
    assert record(7, "CLI determinism", ok, f"{len(first)} files compared, {len(differing)} differ")


@pytest.mark.slow
def test_criterion_8_grid_vs_random():
    t0 = time.perf_counter()
    stack, target, mask = make_scene(seed=0, size=64)
    rows = sensitivity_sweep(["DFGPs"], [500], ["grid", "random"], range(5), stack, mask, target, BENCHMARK)
    med = {s: float(np.median([r["mae"] for r in rows if r["scenario"] == s])) for s in ("grid", "random")}
    ok = med["grid"] >= med["random"]
    assert record(8, "grid vs random sampling", ok,
                  f"median MAE grid {med['grid']:.4f}, random {med['random']:.4f}, "
                  f"{time.perf_counter() - t0:.0f}s")
