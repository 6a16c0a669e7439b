"""Acceptance criteria, one test each; a PASS/FAIL summary is printed at the end of the run."""

import hashlib
import json
import math
import os
import threading
from pathlib import Path

import numpy as np
import pytest
import requests

from conftest import criterion
from oracles import accept_oracle, rescale_oracle
from iterlnl import (CategoryBuffers, ClassifierModel, IterConfig, LnlConfig, NoisyLabeling,
                     ProtocolError, TrainConfig, estimate_noise_rate, grad_check, keep_ratio,
                     load_idx, rescale, run_iterlnl, train_source, wrap_as_blackbox)
from iterlnl.datagen import DatasetSplit
from iterlnl.blackbox import from_function, make_server, remote
from iterlnl.cli import main
from iterlnl.iterative import evaluate
from iterlnl.lnl import accept_batch, empirical_noise_rate, noisy_labeling


# 1 -------------------------------------------------------------------------------
def test_c1_rescale_suite():
    with criterion("C1 rescale unit suite", max_seconds=1):
        grid = [i / 1000 for i in range(1001)]
        for kappa in (0.5, 1.0, 2.0, 4.0):
            vals = [rescale(x, kappa) for x in grid]
            for p in (0.0, 0.5, 1.0):
                assert rescale(p, kappa) == p
            assert all(a <= b for a, b in zip(vals, vals[1:])), f"not monotone at kappa={kappa}"
            for x, v in zip(grid, vals):
                assert abs(rescale(1 - x, kappa) - (1 - v)) <= 1e-12
                assert abs(v - rescale_oracle(x, kappa)) <= 1e-12
                if kappa == 1.0:
                    assert abs(v - x) <= 1e-12


# 2 -------------------------------------------------------------------------------
def test_c2_schedule_suite():
    with criterion("C2 keep-ratio schedule suite", max_seconds=1):
        r = np.random.default_rng(2)
        for _ in range(1000):
            n_k = float(r.uniform(1, 5000))
            eps = float(r.uniform(0, 1))
            n = int(r.integers(0, 10_000))
            assert keep_ratio(0, n_k, eps) == 1.0
            assert keep_ratio(max(n, math.ceil(n_k)), n_k, eps) == 1.0 - eps
            assert keep_ratio(n + 1, n_k, eps) <= keep_ratio(n, n_k, eps)


# 3 -------------------------------------------------------------------------------
def _instance(r, k, h, fill, pooled):
    buffers = CategoryBuffers(k, h, pooled=pooled)
    windows = {c: [math.inf] * h for c in range(1 if pooled else k)}
    if fill == "inf":
        pushes = 0
    elif fill == "partial":
        pushes = int(r.integers(1, max(2, h)))
    else:
        pushes = int(r.integers(h, 3 * h + 1))
    for _ in range(pushes * (1 if pooled else k)):
        c = int(r.integers(0, k))
        v = float(r.exponential(1.0)) if r.random() > 0.1 else float(r.integers(0, 3))  # some ties
        buffers.push(c, v)
        key = 0 if pooled else c
        windows[key] = windows[key][1:] + [v]
    return buffers, windows


def test_c3_selection_oracle_equivalence():
    with criterion("C3 selection matches brute-force oracle", max_seconds=5):
        r = np.random.default_rng(3)
        cases = 0
        for h in (1, 4, 100):
            for k in (2, 12):
                for fill in ("inf", "partial", "full"):
                    for pooled in (False, True):
                        for _ in range(10):
                            buffers, windows = _instance(r, k, h, fill, pooled)
                            labels = r.integers(0, k, 64)
                            losses = np.where(r.random(64) < 0.1, r.integers(0, 3, 64), r.exponential(1.0, 64))
                            R = float(r.choice([r.uniform(0, 1), 1.0, 0.5, 0.01]))
                            got = accept_batch(losses, labels, buffers, R).tolist()
                            want = accept_oracle(losses.tolist(), labels.tolist(), windows, R, pooled=pooled)
                            assert got == want, f"h={h} k={k} fill={fill} pooled={pooled} R={R}"
                            cases += 1
        assert cases >= 200


# 4 -------------------------------------------------------------------------------
def test_c4_gradient_check():
    with criterion("C4 gradient check", max_seconds=10):
        r = np.random.default_rng(4)
        for i in range(10):
            d, k = int(r.integers(2, 20)), int(r.integers(2, 8))
            hidden = [int(v) for v in r.integers(2, 40, int(r.integers(0, 3)))]
            m = ClassifierModel.init([d, *hidden, k], seed=i)
            assert m.n_params <= 5000
            err = grad_check(m, r.normal(size=(8, d)), r.integers(0, k, 8))
            assert err < 1e-4, f"model {i} {[d, *hidden, k]}: relative error {err:.2e}"


# 5 -------------------------------------------------------------------------------
def _confidence_box(q, n=400, k=3):
    """Black box whose top confidence exceeds gamma=0.9 on exactly a q share of rows."""
    high = int(round(q * n))
    probs = np.tile([0.5, 0.3, 0.2], (n, 1))
    probs[:high] = [0.98, 0.01, 0.01]
    return NoisyLabeling.from_probs(probs)


def test_c5_noise_rate_estimation(fixture_runs):
    fixture_runs.source_model  # fixture setup is not part of this budget
    with criterion("C5 noise-rate estimation", max_seconds=10):
        for kappa in (0.5, 1.0, 2.0, 4.0):
            for q in (0.0, 0.25, 0.5, 0.75, 1.0):
                got = estimate_noise_rate(_confidence_box(q), LnlConfig(kappa=kappa))
                assert abs(got - (1 - rescale_oracle(q, kappa))) <= 1e-12, (kappa, q, got)

        # with-Val: 50 labeled samples per class from the fixture target
        target, handle = fixture_runs.target, fixture_runs.handle
        truth = target.evaluation_labels()
        eps_gt = empirical_noise_rate(noisy_labeling(handle, target), truth)
        r = np.random.default_rng(5)
        pick = np.concatenate([r.choice(np.flatnonzero(truth == c), 50, replace=False)
                               for c in range(target.k)])
        val = target.subset(pick)
        val = DatasetSplit(val.features, val.evaluation_labels(), val.k)
        assert val.n == 300
        est = estimate_noise_rate(None, LnlConfig(validation_set=val), handle)
        assert abs(est - eps_gt) <= 0.05, f"with-Val {est:.4f} vs ground truth {eps_gt:.4f}"


# 6 -------------------------------------------------------------------------------
def test_c6_end_to_end_adaptation(fixture_runs):
    with criterion("C6 end-to-end synthetic adaptation", max_seconds=300):
        source_acc = evaluate(fixture_runs.source_model, fixture_runs.target).accuracy
        assert 0.55 <= source_acc <= 0.75, f"source target accuracy {source_acc:.3f}"
        _, records = fixture_runs.run(steps=3)
        final = records[-1].model_acc
        assert final - source_acc >= 0.10, f"{source_acc:.3f} -> {final:.3f}"
        assert records[0].model_acc > records[0].label_acc
        # budget covers source training plus the M=3 run, even if cached earlier
        spent = fixture_runs.timings["source"] + fixture_runs.timings[("run", 3, ())]
        assert spent < 300, f"pipeline took {spent:.0f}s"
        # an independent single-step run reproduces step 1 bit for bit
        _, single = fixture_runs.run(steps=1)
        assert single[0].epsilon_est == records[0].epsilon_est
        assert single[0].model_acc == records[0].model_acc
        print(f"\nsource {source_acc:.3f}; steps " +
              ", ".join(f"m={r.m}: eps={r.epsilon_est:.3f} labels={r.label_acc:.3f} model={r.model_acc:.3f}"
                        for r in records))


# 7 -------------------------------------------------------------------------------
def test_c7_ablation_ordering(fixture_runs):
    with criterion("C7 ablation ordering", max_seconds=900):
        target = fixture_runs.target
        full_model, full = fixture_runs.run(steps=3)
        _, no_iter = fixture_runs.run(steps=1)
        cates_model, no_cates = fixture_runs.run(steps=3, no_category_sampling=True)
        full_acc = full[-1].model_acc
        assert full_acc >= no_iter[-1].model_acc - 0.01, (full_acc, no_iter[-1].model_acc)
        assert full_acc >= no_cates[-1].model_acc - 0.01, (full_acc, no_cates[-1].model_acc)
        gap = evaluate(full_model, target).per_class - evaluate(cates_model, target).per_class
        assert gap.max() >= 0.10, f"largest per-class gap {gap.max():.3f}"
        print(f"\nfull {full_acc:.3f}, w/o-Iter {no_iter[-1].model_acc:.3f}, "
              f"w/o-CateS {no_cates[-1].model_acc:.3f}, per-class gap {np.round(gap, 3).tolist()}")


# 8 -------------------------------------------------------------------------------
def test_c8_blackbox_contract(fixture_runs):
    with criterion("C8 black-box contract", max_seconds=10):
        model = fixture_runs.source_model
        server = make_server(model, "127.0.0.1:0")
        threading.Thread(target=server.serve_forever, daemon=True).start()
        url = "http://127.0.0.1:%d" % server.server_address[1]
        try:
            probe = np.random.default_rng(8).normal(size=(256, model.d))
            diff = np.abs(remote(url).predict_batch(probe) - wrap_as_blackbox(model).predict_batch(probe))
            assert diff.max() <= 1e-6

            # malformed requests
            with pytest.raises(ProtocolError):
                remote(url).predict_batch(np.zeros((2, model.d + 1)))
            bad_bodies = ['{"inputs": [[1, 2]]}', "not json", '{"x": 1}',
                          json.dumps({"inputs": [["a"] * model.d]}),
                          json.dumps({"inputs": [[float("nan")] * model.d]})]
            for body in bad_bodies:
                r = requests.post(url + "/predict", data=body, timeout=5)
                assert r.status_code == 400, body
            with pytest.raises(ProtocolError):
                from_function(lambda x: np.tile([0.5, 0.3], (len(x), 1)), 2).predict_batch(np.zeros((1, 1)))

            # no route exposes parameters
            info = requests.get(url + "/info", timeout=5).json()
            assert set(info) == {"d", "k"}
            for route in ("/", "/weights", "/params", "/model", "/checkpoint", "/state"):
                assert requests.get(url + route, timeout=5).status_code == 404
                assert requests.post(url + route, json={}, timeout=5).status_code == 404
            handle = remote(url)
            assert {n for n in dir(handle) if not n.startswith("_")} == {"predict_batch", "k"}
        finally:
            server.shutdown()
            server.server_close()


# 9 -------------------------------------------------------------------------------
def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_c9_cli_determinism(tmp_path):
    with criterion("C9 adapt determinism", max_seconds=600):
        data = tmp_path / "data"
        assert main(["gen-data", "--out-dir", str(data), "--preset", "fixture"]) == 0
        assert main(["train-source", "--data", str(data / "source.csv"), "--out", str(tmp_path / "src.ckpt")]) == 0
        runs = []
        for name in ("a", "b"):
            run = tmp_path / name
            assert main(["adapt", "--checkpoint", str(tmp_path / "src.ckpt"), "--target", str(data / "target.csv"),
                         "--labeled-target", "--steps", "3", "--run-dir", str(run)]) == 0
            runs.append(run)
        a, b = runs
        assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
        ckpts = sorted(p.relative_to(a) for p in a.rglob("*.ckpt"))
        assert len(ckpts) >= 2
        for rel in ckpts:
            assert _digest(a / rel) == _digest(b / rel), rel


# 10 ------------------------------------------------------------------------------
def _digits_files(root):
    def find(stem):
        for name in (stem, stem + ".gz"):
            if (root / name).exists():
                return root / name
        raise FileNotFoundError(root / stem)
    return [find(s) for s in ("mnist-train-images-idx3-ubyte", "mnist-train-labels-idx1-ubyte",
                              "usps-images-idx3-ubyte", "usps-labels-idx1-ubyte")]


@pytest.mark.slow
def test_c10_digits_mnist_to_usps():
    with criterion("C10 digits M->U (optional)", max_seconds=1800):
        root = os.environ.get("ILNL_DIGITS_DIR")
        if not root:
            pytest.skip("set ILNL_DIGITS_DIR to run the digits analogue")
        mi, ml, ui, ul = _digits_files(Path(root))
        mnist = load_idx(mi, ml, k=10)
        usps = load_idx(ui, ul, k=10)
        pick = np.random.default_rng(10).permutation(mnist.n)[:10_000]
        source = mnist.subset(pick)
        target = DatasetSplit(usps.features, None, 10, _hidden_labels=usps.labels)
        model = train_source(source, TrainConfig(seed=0))
        source_acc = evaluate(model, target).accuracy
        final, _ = run_iterlnl(wrap_as_blackbox(model), target, IterConfig(steps=3, seed=0))
        final_acc = evaluate(final, target).accuracy
        assert final_acc - source_acc >= 0.05, f"{source_acc:.3f} -> {final_acc:.3f}"
