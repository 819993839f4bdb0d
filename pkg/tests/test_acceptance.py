"""Acceptance suite: the end-to-end guarantees this artifact ships under.

Each class freezes one externally visible contract: exact gradients,
transform and fit oracles, scaler postconditions, shape contracts,
byte-level reproducibility of the command-line surface, trainability on
separable data, the designed path-complementarity experiment, and
metric parity for repeated runs. Wall-clock budgets are asserted where
a contract includes one. The heavyweight experiment honours
``ITST_THREADS`` so it can be parallelized without changing results.
"""

import json
import os
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from helpers import dft2_reference, fd_grad, rel_err
from itst.features import (
    WindowedDataset,
    apply_scaler,
    engineer_decoder_features,
    fft2d_magnitude,
    fit_quadratic,
    fit_scaler,
)
from itst.model import (
    ModelConfig,
    classify,
    encoder_forward,
    init_model,
    model_logits,
    prepare_path_inputs,
)
from itst.synth import CLASS_NAMES, DESK_SCALE, GenConfig, generate_dataset
from itst.tensor import Tape, backward, cross_entropy
from itst.tensorfile import save_checkpoint, save_dataset
from itst.training import (
    TrainHyper,
    ablate,
    ablation_csv,
    confusion_csv,
    evaluate,
    run_repeated,
    train,
)

WORKERS = max(1, int(os.environ.get("ITST_THREADS", "1")))

SMALL_MODEL = ModelConfig(d_model=16, heads=2, encoder_layers=1,
                          decoder_layers=1, d_ffn=32, dropout=0.0)


def run_cli(*args):
    env = dict(os.environ, ITST_THREADS="1")
    return subprocess.run([sys.executable, "-m", "itst.cli", *args],
                          capture_output=True, text=True, env=env)


def dir_bytes(root):
    """Map of relative path -> file bytes for everything under root."""
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    assert out, f"no files written under {root}"
    return out


@pytest.fixture(scope="module")
def desk_dataset():
    """The scale-128 dataset shared by the heavyweight criteria."""
    return generate_dataset(GenConfig(seed=7, scale=DESK_SCALE))


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("determinism")
    config = root / "cfg.json"
    config.write_text(json.dumps({
        "model": {"d_model": 16, "heads": 2, "encoder_layers": 1,
                  "decoder_layers": 1, "d_ffn": 32, "dropout": 0.0},
        "train": {"batch_size": 16, "max_steps": 25, "warmup_steps": 50},
    }))
    data = root / "data"
    proc = run_cli("gen-data", "--seed", "3", "--scale", "0.0014",
                   "--out", str(data))
    assert proc.returncode == 0, proc.stderr
    return {"root": root, "config": str(config), "data": str(data)}


class TestGradientIntegrity:
    def test_every_parameter_matches_central_differences(self):
        started = time.perf_counter()
        config = ModelConfig(d_model=8, heads=2, encoder_layers=1,
                             decoder_layers=1, d_ffn=16, dropout=0.0,
                             window=6, features=3)
        model = init_model(config, seed=0)
        rng = np.random.default_rng(1)
        windows = rng.normal(size=(3, 6, 3))
        labels = np.array([0, 5, 11])
        inputs = prepare_path_inputs(windows, config)
        feats = engineer_decoder_features(windows)

        def loss():
            logits = model_logits(model, inputs, feats, training=False)
            return cross_entropy(logits, labels)

        params = model.parameters()
        with Tape():
            backward(loss(), params=params)
        analytic = [p.grad.copy() for p in params]
        numeric = fd_grad(lambda: loss().item(), params, h=1e-6)
        worst = max(rel_err(a, n) for a, n in zip(analytic, numeric))
        assert worst <= 1e-6
        assert time.perf_counter() - started < 60.0


class TestTransformOracle:
    def test_matches_naive_double_sum_dft(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.normal(size=(40, 34))
            reference = np.abs(dft2_reference(x))
            assert rel_err(fft2d_magnitude(x), reference) <= 1e-9

    def test_parseval_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.normal(size=(40, 34))
            energy = np.sum(fft2d_magnitude(x) ** 2)
            direct = x.size * np.sum(x * x)
            assert abs(energy - direct) / direct <= 1e-9


class TestQuadraticFitOracle:
    def test_exact_recovery_on_polynomial_columns(self):
        rng = np.random.default_rng(4)
        t = np.arange(40, dtype=np.float64)
        for _ in range(100):
            coef = rng.uniform(-5.0, 5.0, size=3)
            column = coef[0] + coef[1] * t + coef[2] * t * t
            assert np.max(np.abs(fit_quadratic(column) - coef)) <= 1e-8

    def test_residuals_orthogonal_on_noisy_columns(self):
        rng = np.random.default_rng(5)
        t = np.arange(40, dtype=np.float64)
        vand = np.stack([np.ones_like(t), t, t * t], axis=1)
        for _ in range(100):
            column = rng.uniform(-5.0, 5.0, 3) @ vand.T + rng.normal(size=40)
            coef = fit_quadratic(column)
            oracle, *_ = np.linalg.lstsq(vand, column, rcond=None)
            assert np.max(np.abs(coef - oracle)) <= 1e-8
            residual = column - vand @ coef
            norms = np.linalg.norm(vand, axis=0) * np.linalg.norm(residual)
            assert np.max(np.abs(vand.T @ residual) / (norms + 1e-30)) <= 1e-8


class TestScalerContract:
    def test_standardizes_and_zeroes_constant_features(self):
        rng = np.random.default_rng(6)
        rows = rng.normal(size=(1000, 34))
        rows *= rng.uniform(0.01, 100.0, size=34)
        rows += rng.uniform(-50.0, 50.0, size=34)
        rows[:, 7] = 3.25
        scaled = apply_scaler(fit_scaler(rows), rows)
        live = np.ones(34, dtype=bool)
        live[7] = False
        assert np.max(np.abs(scaled[:, live].mean(axis=0))) <= 1e-9
        assert np.max(np.abs(scaled[:, live].var(axis=0) - 1.0)) <= 1e-9
        assert np.all(scaled[:, 7] == 0.0)


class TestShapeContracts:
    def test_memory_token_count_is_114(self):
        assert SMALL_MODEL.memory_tokens == 114
        model = init_model(SMALL_MODEL, seed=0)
        rng = np.random.default_rng(7)
        windows = rng.normal(size=(2, 40, 34))
        memory = encoder_forward(model, prepare_path_inputs(windows, SMALL_MODEL))
        assert memory.data.shape == (2, 114, SMALL_MODEL.d_model)

    def test_decoder_features_are_5_by_34(self):
        rng = np.random.default_rng(8)
        feats = engineer_decoder_features(rng.normal(size=(2, 40, 34)))
        assert feats.shape == (2, 5, 34)

    def test_classify_emits_12_probabilities(self):
        model = init_model(SMALL_MODEL, seed=0)
        rng = np.random.default_rng(9)
        probs = classify(model, rng.normal(size=(40, 34)))
        assert probs.shape == (12,)
        assert np.all(probs >= 0.0)
        assert abs(probs.sum() - 1.0) <= 1e-12


class TestCliDeterminism:
    def _both(self, workspace, name, args):
        outs = []
        for tag in ("a", "b"):
            out = workspace["root"] / f"{name}_{tag}"
            proc = run_cli(*args, "--out", str(out))
            assert proc.returncode == 0, proc.stderr
            outs.append(out)
        return dir_bytes(outs[0]), dir_bytes(outs[1])

    def test_gen_data_reruns_byte_identical(self, cli_workspace):
        first, second = self._both(cli_workspace, "gen",
                                   ["gen-data", "--seed", "3", "--scale", "0.0014"])
        assert first == second

    def test_train_reruns_byte_identical(self, cli_workspace):
        first, second = self._both(cli_workspace, "train",
                                   ["train", "--data", cli_workspace["data"],
                                    "--config", cli_workspace["config"], "--seed", "1"])
        assert set(first) == {"report.json", "confusion.csv", "checkpoint.itst"}
        assert first == second

    def test_ablate_reruns_byte_identical(self, cli_workspace):
        first, second = self._both(cli_workspace, "ablate",
                                   ["ablate", "--data", cli_workspace["data"],
                                    "--config", cli_workspace["config"], "--seed", "0"])
        assert first == second

    def test_search_reruns_byte_identical(self, cli_workspace):
        first, second = self._both(cli_workspace, "search",
                                   ["search", "--data", cli_workspace["data"],
                                    "--config", cli_workspace["config"],
                                    "--budget", "2", "--seed", "9"])
        assert first == second


class TestOverfitCheck:
    def test_separable_data_reaches_low_training_cc(self):
        started = time.perf_counter()
        rng = np.random.default_rng(0)
        data = 0.1 * rng.normal(size=(40, 40, 34))
        labels = np.repeat(np.arange(5), 8)
        for i, label in enumerate(labels):
            data[i, :, label] += 3.0
        dataset = WindowedDataset(data=data, labels=labels.astype(np.int64))
        hyper = TrainHyper(batch_size=40, max_steps=500, warmup_steps=50, seed=0)
        model = init_model(SMALL_MODEL, seed=0)
        report, _ = train(model, dataset, dataset, hyper)
        curve = np.asarray(report.loss_curve)
        assert curve.size <= 500
        assert curve.min() < 0.05
        assert time.perf_counter() - started < 120.0


class TestPathComplementarity:
    def test_triple_path_beats_every_single_path(self, desk_dataset):
        started = time.perf_counter()
        train_set, test_set = desk_dataset
        config = ModelConfig(d_model=32, heads=4, encoder_layers=1,
                             decoder_layers=1, d_ffn=64, dropout=0.0)
        hyper = TrainHyper(batch_size=64, max_steps=600, warmup_steps=2000, seed=0)
        variants = (("time",), ("sensor",), ("frequency",),
                    ("time", "sensor", "frequency"))
        means = {}
        for paths in variants:
            stats = run_repeated(replace(config, enabled_paths=paths), hyper,
                                 train_set, test_set, n=5, workers=WORKERS)
            means[paths] = stats.cc_mean
        triple = means[("time", "sensor", "frequency")]
        assert triple < means[("time",)]
        assert triple < means[("sensor",)]
        assert triple < means[("frequency",)]

        # the full seven-variant table: structure check on a short budget
        rows = ablate(config, replace(hyper, max_steps=60),
                      train_set, test_set, workers=WORKERS)
        lines = ablation_csv(rows).strip().split("\n")
        assert lines[0] == "time_domain,sensor_domain,frequency_domain,test_cc"
        assert len(lines) == 8
        marks = [tuple(line.split(",")[:3]) for line in lines[1:]]
        assert marks == [("1", "0", "0"), ("0", "1", "0"), ("0", "0", "1"),
                         ("1", "1", "0"), ("1", "0", "1"), ("0", "1", "1"),
                         ("1", "1", "1")]
        assert time.perf_counter() - started < 1800.0


class TestRepeatedRunMetrics:
    def test_stats_recomputable_from_embedded_reports(self, desk_dataset):
        train_set, test_set = desk_dataset
        hyper = TrainHyper(batch_size=32, max_steps=40, warmup_steps=50, seed=0)
        stats = run_repeated(SMALL_MODEL, hyper, train_set, test_set,
                             n=20, workers=WORKERS)
        assert len(stats.reports) == 20
        ccs = np.array([r.test_cc for r in stats.reports])
        assert abs(stats.cc_mean - ccs.mean()) <= 1e-12
        assert abs(stats.cc_var - np.var(ccs)) <= 1e-12
        assert abs(stats.cc_best - ccs.min()) <= 1e-12
        doc = stats.to_json_dict()
        assert doc["runs"] == 20
        assert doc["cc_mean"] == stats.cc_mean
        assert doc["cc_var"] == stats.cc_var
        assert doc["cc_best"] == stats.cc_best

        confusion = np.asarray(stats.reports[0].confusion)
        assert np.max(np.abs(confusion.sum(axis=1) - 1.0)) <= 1e-9
        lines = confusion_csv(confusion, CLASS_NAMES).strip().split("\n")
        parsed = np.array([[float(x) for x in line.split(",")[1:]]
                           for line in lines[1:]])
        assert np.max(np.abs(parsed.sum(axis=1) - 1.0)) <= 1e-9

    def test_oracle_checkpoint_gives_identity_confusion(self, tmp_path):
        def marker_windows():
            data = np.zeros((24, 40, 34))
            labels = np.repeat(np.arange(12), 2)
            for i, label in enumerate(labels):
                data[i, :, label] = 10.0
            return WindowedDataset(data=data, labels=labels.astype(np.int64))

        train_set, test_set = marker_windows(), marker_windows()
        hyper = TrainHyper(batch_size=24, max_steps=300, warmup_steps=50, seed=0)
        model = init_model(SMALL_MODEL, seed=0)
        report, classifier = train(model, train_set, test_set, hyper)
        assert report.test_accuracy == 1.0

        # saturate the head: the winning logit then dwarfs every other,
        # driving -log p(true) to exactly zero in double precision
        classifier.model.params["head.w"].data *= 1000.0
        classifier.model.params["head.b"].data *= 1000.0
        cc, accuracy, confusion = evaluate(classifier, test_set)
        assert cc == 0.0
        assert accuracy == 1.0
        assert np.array_equal(confusion, np.eye(12))

        data_dir = tmp_path / "data"
        checkpoint = tmp_path / "oracle.itst"
        save_dataset(str(data_dir), train_set, test_set,
                     GenConfig(seed=0, scale=24 / 2905))
        save_checkpoint(str(checkpoint), classifier.model, classifier.scaler,
                        step=hyper.max_steps)
        proc = run_cli("eval", "--data", str(data_dir), "--checkpoint",
                       str(checkpoint), "--out", str(tmp_path / "eval"))
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout.splitlines()[-1] == "CC=0.000000"
        lines = (tmp_path / "eval" / "confusion.csv").read_text().strip().split("\n")
        parsed = np.array([[float(x) for x in line.split(",")[1:]]
                           for line in lines[1:]])
        assert np.array_equal(parsed, np.eye(12))
        assert np.all(np.diag(parsed) == 1.0)
