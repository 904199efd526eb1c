"""Acceptance criteria, one test per criterion.

Each test prints ``PASS``/``FAIL`` with its runtime; the lines are repeated in
the pytest terminal summary. Run just this module with
``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
"""

import functools
import math
import os
import socket
import struct
import subprocess
import sys
import time
from decimal import Decimal

import httpx
import numpy as np
import pytest
import scipy.sparse as sp

from stepsaver.classifier import (
    MAGIC,
    FeatureExtractor,
    LinearModel,
    ModelFormatError,
    TrainConfig,
    UnsupportedVersionError,
    batch_loss_and_grad,
    evaluate,
    fit_features,
    load_model,
    predict,
    save_model,
    train,
)
from stepsaver.dataset import (
    BalanceConfig,
    ChecksumError,
    DatasetSplit,
    LabeledPrompt,
    balance,
    class_counts,
    filter_english,
    read_dataset,
    split,
    write_dataset,
)
from stepsaver.metrics import FeatureStats, GrayImage, accumulate_stats, frechet_distance, ssim
from stepsaver.report import render_report, savings_report
from stepsaver.service import (
    BackgroundServer,
    MockTiming,
    batch_recommend,
    create_mock_backend,
    tally_recommendations,
)
from stepsaver.sweep import (
    DEFAULT_STEP_GRID,
    OptimalStepLabel,
    Rule,
    SsimSeries,
    StepSweep,
    detect_optimal,
    label_corpus,
    read_manifest,
    write_manifest,
)
from stepsaver.synthetic import planted_sweep_images, sentinel_corpus, skewed_label_rows, write_sweep_images

from oracles import bce_sum, central_difference, frechet_1d, naive_ssim

RESULTS = []

STEP_TIMES = {30: 2.25, 50: 3.72, 100: 7.36}


def criterion(number, title, limit_seconds):
    """Time the test, enforce its runtime limit and record a PASS/FAIL line."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                fn(*args, **kwargs)
            except BaseException as exc:
                elapsed = time.perf_counter() - start
                _record(number, title, False, elapsed, limit_seconds, f"{type(exc).__name__}: {exc}")
                raise
            elapsed = time.perf_counter() - start
            ok = elapsed < limit_seconds
            _record(number, title, ok, elapsed, limit_seconds, "" if ok else "runtime limit exceeded")
            assert ok, f"took {elapsed:.3f}s, limit {limit_seconds}s"

        return run

    return wrap


def _record(number, title, ok, elapsed, limit, note):
    note = note.splitlines()[0][:120] if note else ""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({elapsed:.3f}s < {limit}s){' ' + note if note else ''}"
    RESULTS.append(line)
    print(line)


def free_port():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class ServeProcess:
    """``python3 -m stepsaver serve`` in a child process, so client and server do not share a GIL."""

    def __init__(self, model_path, backend_url=None):
        self.port = free_port()
        self.url = f"http://127.0.0.1:{self.port}"
        self.env = dict(os.environ, STEPSAVER_MODEL=str(model_path), STEPSAVER_LISTEN=f"127.0.0.1:{self.port}")
        if backend_url:
            self.env["STEPSAVER_BACKEND_URL"] = backend_url

    def __enter__(self):
        self.proc = subprocess.Popen([sys.executable, "-m", "stepsaver", "serve"], env=self.env,
                                     stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            if self.proc.poll() is not None:
                raise RuntimeError(f"serve exited: {self.proc.stderr.read().decode()}")
            try:
                if httpx.get(self.url + "/healthz").status_code == 200:
                    return self
            except httpx.TransportError:
                time.sleep(0.05)
        raise RuntimeError("serve did not become healthy")

    def __exit__(self, *exc):
        self.proc.terminate()
        self.proc.wait(timeout=10)
        self.proc.stderr.close()


# 1 -------------------------------------------------------------------------------------

@criterion(1, "first-decline reproduction", 0.001)
def test_criterion_1_first_decline():
    series = SsimSeries.from_scores([20, 30, 40, 50, 60], [0.5261, 0.6762, 0.6769, 0.4103])
    label = detect_optimal(series)
    assert label.steps == 50 and label.rule is Rule.FIRST_DECLINE


# 2 -------------------------------------------------------------------------------------

@criterion(2, "savings arithmetic", 1.0)
def test_criterion_2_savings():
    rep = savings_report({30: 2337, 50: 420}, STEP_TIMES)
    expected = {"flexi": ("6820.65", "1.89"), "fixed-50": ("10256.04", "2.85"), "fixed-100": ("20291.52", "5.64")}
    for policy, (seconds, hours) in expected.items():
        row = rep.row(policy)
        assert row.total_seconds == Decimal(seconds)
        assert f"{row.total_seconds:.2f}" == seconds
        assert row.total_hours == Decimal(hours)
    text = render_report(rep)
    for token in ("6,820.65", "10,256.04", "20,291.52", "1.89", "2.85", "5.64"):
        assert token in text


# 3 -------------------------------------------------------------------------------------

@criterion(3, "SSIM oracle equivalence", 30.0)
def test_criterion_3_ssim_oracle():
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for i in range(100):
        h, w = (64, 64) if i == 0 else rng.integers(11, 65, size=2)
        a = rng.random((h, w))
        # alternate independent pairs with correlated ones so scores spread over [-1, 1]
        b = rng.random((h, w)) if i % 2 else np.clip(a + rng.uniform(0.01, 0.5) * rng.standard_normal((h, w)), 0, 1)
        got = ssim(GrayImage.from_array(a), GrayImage.from_array(b))
        worst = max(worst, abs(got - naive_ssim(a, b)))
        x = GrayImage.from_array(a)
        assert abs(ssim(x, x) - 1.0) <= 1e-9
    assert worst < 1e-6, worst


# 4 -------------------------------------------------------------------------------------

@criterion(4, "Frechet closed forms", 1.0)
def test_criterion_4_frechet():
    def one_d(m, v):
        return FeatureStats([m], [[v]], 10)

    assert abs(frechet_distance(one_d(0, 1), one_d(1, 1)) - 1.0) <= 1e-9
    assert abs(frechet_distance(one_d(0, 1), one_d(0, 4)) - 1.0) <= 1e-9
    assert abs(frechet_distance(one_d(0.3, 2.0), one_d(-1.2, 0.7)) - frechet_1d(0.3, 2.0, -1.2, 0.7)) <= 1e-9
    rng = np.random.default_rng(4)
    for d in (1, 4, 16):
        p = accumulate_stats(rng.standard_normal((3 * d + 5, d)))
        q = accumulate_stats(rng.standard_normal((2 * d + 7, d)) * 1.7 + 0.4)
        assert frechet_distance(p, p) <= 1e-9
        assert abs(frechet_distance(p, q) - frechet_distance(q, p)) <= 1e-6


# 5 -------------------------------------------------------------------------------------

@criterion(5, "dataset pipeline", 60.0)
def test_criterion_5_dataset():
    rows = skewed_label_rows({20: 48347, 30: 162783, 50: 76210})
    kept, dropped = filter_english(rows)
    assert dropped == 0
    balanced = balance(kept, BalanceConfig(keep_classes={30, 50}, seed=0))
    assert class_counts(balanced) == {30: 76210, 50: 76210}

    ds = split(balanced, 2757, seed=0)
    ids = [id(r) for part in ds.parts().values() for r in part]
    assert len(ids) == len(set(ids)) == len(balanced)
    assert set(ids) == {id(r) for r in balanced}
    assert len(ds.test) == 2757
    rest = len(balanced) - 2757
    assert len(ds.train) == rest * 9 // 10 and len(ds.validation) == rest - rest * 9 // 10
    assert split(balanced, 2757, seed=0) == ds
    assert balance(kept, BalanceConfig(seed=0)) == balanced


# 6 -------------------------------------------------------------------------------------

@criterion(6, "classifier properties", 60.0)
def test_criterion_6_classifier():
    rows = sentinel_corpus(2000, seed=0)
    ds = split(rows, 0, seed=0)
    cfg = TrainConfig(learning_rate=2e-3, train_batch=16, epochs=5, seed=0)
    assert (cfg.learning_rate, cfg.train_batch) == (2e-3, 16)
    extractor = fit_features([r.prompt for r in ds.train])
    result = train(ds.train, ds.validation, extractor, cfg)
    assert len(result.history) <= 5
    assert max(h.validation.accuracy for h in result.history) >= 0.99

    # analytic gradient against central differences
    rng = np.random.default_rng(6)
    for trial in range(10):
        dim, n = 24, 9
        X = rng.standard_normal((n, dim)) * (rng.random((n, dim)) < 0.4)
        y = (rng.random(n) < 0.5).astype(float)
        w, b = rng.standard_normal(dim) * 0.3, float(rng.standard_normal())
        _, gw, gb = batch_loss_and_grad(w, b, sp.csr_matrix(X), y, 1e-5)
        data = list(zip(X.tolist(), y.tolist()))
        numeric = central_difference(lambda p: bce_sum(p[:-1], p[-1], data, 1e-5), list(w) + [b])
        rel = np.abs(np.append(gw, gb) - numeric).max() / max(np.abs(numeric).max(), 1e-3)
        assert rel < 1e-5, (trial, rel)

    # a constant p = 0.5 model
    half = evaluate(LinearModel.zeros(extractor.hash_dim), extractor, ds.validation)
    assert abs(half.bce_loss - math.log(2)) <= 1e-9

    again = train(ds.train, ds.validation, extractor, cfg)
    assert again.model == result.model
    assert again.model.weights.tobytes() == result.model.weights.tobytes()
    assert [h.train_loss for h in again.history] == [h.train_loss for h in result.history]


# 7 -------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_model(tmp_path_factory):
    rows = sentinel_corpus(2000, seed=1)
    ds = split(rows, 0, seed=1)
    extractor = fit_features([r.prompt for r in ds.train])
    model = train(ds.train, ds.validation, extractor, TrainConfig(seed=1)).model
    path = tmp_path_factory.mktemp("accept") / "model.bin"
    save_model(model, extractor, path)
    return path


@criterion(7, "service round trip", 60.0)
def test_criterion_7_service(trained_model, tmp_path):
    backend = create_mock_backend(MockTiming(scale=0.001))
    with BackgroundServer(backend) as mock, ServeProcess(trained_model, mock.url + "/txt2img") as server:
        with httpx.Client(base_url=server.url, timeout=30) as client:
            for prompt in ("alpha a lighthouse at dusk", "a lighthouse at dusk"):
                doc = client.post("/v1/generate", json={"prompt": prompt}).json()
                assert doc["steps_used"] == doc["recommendation"]["steps"]
                assert backend.state.requests[-1]["steps"] == doc["steps_used"]

            for i in range(200):
                client.post("/v1/recommend", json={"prompt": f"warm up {i}"})
            latencies = np.empty(10_000)
            for i in range(10_000):
                start = time.perf_counter()
                resp = client.post("/v1/recommend", json={"prompt": f"word{i % 997} scene {i} in oil paint"})
                latencies[i] = time.perf_counter() - start
                assert resp.status_code == 200
    p99_ms = float(np.percentile(latencies, 99)) * 1000
    print(f"recommend round-trip P99 {p99_ms:.3f} ms over 10000 requests")
    assert p99_ms < 5.0

    prompts = [f"prompt {i} {'alpha' if i % 7 == 0 else 'beta'}" for i in range(2757)]
    src, dest = tmp_path / "prompts.txt", tmp_path / "recs.tsv"
    src.write_text("\n".join(prompts) + "\n", encoding="utf-8")
    from stepsaver.classifier import LinearStepClassifier
    summary = batch_recommend(LinearStepClassifier.load(trained_model), src, dest)
    lines = dest.read_text(encoding="utf-8").splitlines()
    assert summary.lines == len(lines) == 2757 and summary.errors == 0
    assert [ln.split("\t")[0] for ln in lines] == prompts


# 8 -------------------------------------------------------------------------------------

@criterion(8, "persistence round trips", 10.0)
def test_criterion_8_persistence(tmp_path):
    rows = [LabeledPrompt(p, s) for p, s in [("a black dog", 30), ("tab\tinside", 50), ("back\\slash", 30),
                                             ("new\nline", 50), ("ünïcode", 30), ("last one", 50)]]
    ds = DatasetSplit(rows[:3], rows[3:5], rows[5:], seed=3)
    write_dataset(ds, tmp_path / "data")
    assert read_dataset(tmp_path / "data") == ds
    with open(tmp_path / "data" / "train.tsv", "a", encoding="utf-8") as fh:
        fh.write("30\textra\n")
    with pytest.raises(ChecksumError):
        read_dataset(tmp_path / "data")

    for weighting in ("binary", "tfidf"):
        ex = fit_features(["alpha one", "two three", "alpha four"], FeatureExtractor(hash_dim=1 << 10, weighting=weighting))
        model = LinearModel(np.random.default_rng(8).standard_normal(ex.hash_dim), bias=0.25)
        path = tmp_path / f"{weighting}.bin"
        save_model(model, ex, path)
        model2, ex2 = load_model(path)
        assert model2 == model and ex2 == ex
        for prompt in ("alpha one", "", "unseen words here", "ünïcode ✓"):
            assert predict(model2, ex2, prompt) == predict(model, ex, prompt)

    data = path.read_bytes()
    path.write_bytes(data[:-9])
    with pytest.raises(ModelFormatError):
        load_model(path)
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(flipped))
    with pytest.raises(ModelFormatError, match="checksum"):
        load_model(path)
    future = bytearray(data)
    future[len(MAGIC):len(MAGIC) + 2] = struct.pack("<H", 2)
    path.write_bytes(bytes(future))
    with pytest.raises(UnsupportedVersionError):
        load_model(path)


# 9 -------------------------------------------------------------------------------------

PLANTED = [30, 50] * 8 + [20, 40, 70, 90]


@criterion(9, "end-to-end desk-scale pipeline", 300.0)
def test_criterion_9_end_to_end(tmp_path):
    sweeps = []
    for i, planted in enumerate(PLANTED):
        prompt = f"{'alpha ' if planted == 50 else ''}synthetic scene {i}"
        images = planted_sweep_images(planted, DEFAULT_STEP_GRID, size=32, seed=100 + i)
        entries = write_sweep_images(images, DEFAULT_STEP_GRID, tmp_path / "sweeps", f"p{i:02d}")
        sweeps.append(StepSweep(prompt, tuple(entries)))
    write_manifest(tmp_path / "sweeps.tsv", sweeps)

    parsed = list(read_manifest(tmp_path / "sweeps.tsv"))
    labels = list(label_corpus(parsed, workers=2))
    assert all(isinstance(lab, OptimalStepLabel) for lab in labels)
    assert [lab.steps for lab in labels] == PLANTED
    assert all(lab.rule is Rule.FIRST_DECLINE for lab in labels)

    rows, _ = filter_english([LabeledPrompt(lab.prompt, lab.steps) for lab in labels])
    balanced = balance(rows, BalanceConfig(keep_classes={30, 50}, seed=9))
    ds = split(balanced, 4, seed=9)
    write_dataset(ds, tmp_path / "data")
    ds = read_dataset(tmp_path / "data")

    extractor = fit_features([r.prompt for r in ds.train], FeatureExtractor(hash_dim=1 << 12))
    result = train(ds.train, ds.validation, extractor, TrainConfig(seed=9))
    save_model(result.model, extractor, tmp_path / "model.bin")

    backend = create_mock_backend(MockTiming(scale=0.001))
    with BackgroundServer(backend) as mock, ServeProcess(tmp_path / "model.bin", mock.url + "/txt2img") as server:
        with httpx.Client(base_url=server.url, timeout=30) as client:
            with open(tmp_path / "served.tsv", "w", encoding="utf-8") as out:
                for lab in labels:
                    doc = client.post("/v1/generate", json={"prompt": lab.prompt}).json()
                    assert doc["steps_used"] in (30, 50)
                    rec = doc["recommendation"]
                    out.write(f"{lab.prompt}\t{doc['steps_used']}\t{rec['probability']!r}\n")
    assert len(backend.state.requests) == len(PLANTED)

    counts = tally_recommendations(tmp_path / "served.tsv")
    rep = savings_report(counts, STEP_TIMES)
    assert rep.corpus_size == len(PLANTED)
    assert rep.row("flexi").total_seconds <= rep.row("fixed-50").total_seconds < rep.row("fixed-100").total_seconds
    print(render_report(rep))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
