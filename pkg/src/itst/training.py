"""Training, evaluation, and the experiment harnesses.

The training loop owns the preprocessing pipeline: it fits the scaler on
the train split only, standardizes both splits, precomputes the per-path
token arrays and decoder statistic tokens once, and then iterates
shuffled mini-batches under a fresh tape per step. Optimization is Adam
with the inverse-square-root warmup schedule; all stochastic pieces
(batch order, dropout masks) draw from named streams keyed by the run
seed, so a run is a pure function of (datasets, config, hyper).

Evaluation duck-types the classifier: anything with a
``predict_logits(windows) -> (n, classes)`` method can be scored. The
cost criterion (CC) is the mean categorical cross-entropy of the true
class, always computed from logits through log-sum-exp, never by
exponentiating probabilities and taking logs.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import LabelError, UsageError
from .features import Scaler, WindowedDataset, apply_scaler, engineer_decoder_features, fit_scaler
from .model import ItstModel, ModelConfig, init_model, model_logits, prepare_path_inputs
from .rng import named_stream
from .tensor import Tape, backward, zero_grads

__all__ = [
    "TrainHyper",
    "TrainReport",
    "RunStats",
    "Classifier",
    "AblationRow",
    "SearchSpace",
    "SearchResult",
    "ABLATION_VARIANTS",
    "lr_schedule",
    "AdamState",
    "adam_step",
    "train",
    "evaluate",
    "run_repeated",
    "ablate",
    "random_search",
    "confusion_csv",
    "ablation_csv",
]


@dataclass(frozen=True)
class TrainHyper:
    """Optimization hyperparameters; defaults follow the reference setup."""

    batch_size: int = 32
    max_steps: int = 3000
    warmup_steps: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 1:
            raise UsageError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.warmup_steps < 1:
            raise UsageError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise UsageError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0.0:
            raise UsageError(f"eps must be positive, got {self.eps}")


def lr_schedule(step: int, d_model: int, warmup_steps: int) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); step is 1-based."""
    if step < 1:
        raise UsageError(f"step is 1-based, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self, model: ItstModel) -> None:
        self.m = {name: np.zeros_like(p.data) for name, p in model.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in model.params.items()}


def adam_step(model: ItstModel, state: AdamState, step: int, lr: float, hyper: TrainHyper) -> None:
    """One bias-corrected Adam update; zero gradients leave params unchanged."""
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in model.params.items():
        g = p.grad
        if g is None:
            raise UsageError(f"parameter {name} has no gradient; run backward first")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


@dataclass
class Classifier:
    """A trained model bundled with its preprocessing scaler."""

    model: ItstModel
    scaler: Scaler

    def predict_logits(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Raw logits for unscaled windows (n, W, k) -> (n, classes)."""
        windows = np.asarray(windows, dtype=np.float64)
        config = self.model.config
        out = np.empty((windows.shape[0], config.num_classes))
        for lo in range(0, windows.shape[0], batch_size):
            chunk = apply_scaler(self.scaler, windows[lo : lo + batch_size])
            inputs = prepare_path_inputs(chunk, config)
            feats = engineer_decoder_features(chunk)
            out[lo : lo + chunk.shape[0]] = model_logits(self.model, inputs, feats).data
        return out

    def predict_proba(self, windows: np.ndarray) -> np.ndarray:
        logits = self.predict_logits(windows)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class TrainReport:
    """Everything a finished run reports; wall time never enters JSON."""

    model_config: ModelConfig
    hyper: TrainHyper
    steps: int
    n_train: int
    n_test: int
    loss_curve: list[float]
    test_cc: float
    test_accuracy: float
    confusion: np.ndarray
    wall_time_s: float

    def to_json_dict(self) -> dict:
        """Deterministic JSON payload with a fixed key order."""
        return {
            "schema_version": 1,
            "model": _config_dict(self.model_config),
            "hyper": _hyper_dict(self.hyper),
            "steps": self.steps,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "test_cc": self.test_cc,
            "test_accuracy": self.test_accuracy,
            "confusion": [[float(x) for x in row] for row in self.confusion],
            "loss_curve": [float(x) for x in self.loss_curve],
        }


@dataclass
class RunStats:
    """Aggregate of repeated runs: mean / variance / best of the test CC."""

    ccs: list[float]
    reports: list[TrainReport] = field(repr=False, default_factory=list)

    @property
    def cc_mean(self) -> float:
        return float(np.mean(self.ccs))

    @property
    def cc_var(self) -> float:
        return float(np.var(self.ccs))  # population variance

    @property
    def cc_best(self) -> float:
        return float(np.min(self.ccs))

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "runs": len(self.ccs),
            "cc_mean": self.cc_mean,
            "cc_var": self.cc_var,
            "cc_best": self.cc_best,
            "ccs": [float(c) for c in self.ccs],
        }


def _config_dict(config: ModelConfig) -> dict:
    return {
        "d_model": config.d_model,
        "heads": config.heads,
        "encoder_layers": config.encoder_layers,
        "decoder_layers": config.decoder_layers,
        "d_ffn": config.d_ffn,
        "dropout": config.dropout,
        "num_classes": config.num_classes,
        "window": config.window,
        "features": config.features,
        "enabled_paths": list(config.enabled_paths),
    }


def _hyper_dict(hyper: TrainHyper) -> dict:
    return {
        "batch_size": hyper.batch_size,
        "max_steps": hyper.max_steps,
        "warmup_steps": hyper.warmup_steps,
        "beta1": hyper.beta1,
        "beta2": hyper.beta2,
        "eps": hyper.eps,
        "seed": hyper.seed,
    }


def _validate_dataset(ds: WindowedDataset, config: ModelConfig, what: str) -> None:
    if ds.data.shape[1:] != (config.window, config.features):
        raise UsageError(
            f"{what} windows {ds.data.shape[1:]} do not match model geometry "
            f"({config.window}, {config.features})"
        )
    if len(ds) == 0:
        raise UsageError(f"{what} split is empty")
    if ds.labels.max() >= config.num_classes:
        raise LabelError(f"{what} label {int(ds.labels.max())} outside [0, {config.num_classes})")


def cc_and_accuracy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean true-class cross-entropy (via log-sum-exp) and accuracy."""
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    nll = lse - logits[np.arange(n), labels]
    acc = float((logits.argmax(axis=1) == labels).mean())
    return float(nll.mean()), acc


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    """Row-normalized confusion: rows true class, columns predicted.

    Each row with at least one sample sums to exactly 1.
    """
    counts = np.zeros((num_classes, num_classes))
    for t, p in zip(labels, preds):
        counts[t, p] += 1.0
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


def evaluate(classifier, dataset: WindowedDataset) -> tuple[float, float, np.ndarray]:
    """Score any ``predict_logits`` object: (cc, accuracy, confusion)."""
    logits = classifier.predict_logits(dataset.data)
    if logits.shape[0] != len(dataset):
        raise UsageError(f"classifier returned {logits.shape[0]} rows for {len(dataset)} windows")
    num_classes = logits.shape[1]
    if dataset.labels.max() >= num_classes:
        raise LabelError(f"label {int(dataset.labels.max())} outside [0, {num_classes})")
    cc, acc = cc_and_accuracy(logits, dataset.labels)
    confusion = confusion_matrix(dataset.labels, logits.argmax(axis=1), num_classes)
    return cc, acc, confusion


def train(
    model: ItstModel,
    train_set: WindowedDataset,
    test_set: WindowedDataset,
    hyper: TrainHyper,
) -> tuple[TrainReport, Classifier]:
    """Fit ``model`` in place and score it on the test split.

    The scaler is fit on the train split only and travels with the
    returned classifier. The loss curve records every step's batch loss.
    """
    config = model.config
    _validate_dataset(train_set, config, "train")
    _validate_dataset(test_set, config, "test")

    started = time.perf_counter()
    scaler = fit_scaler(train_set.data.reshape(-1, config.features))
    scaled = apply_scaler(scaler, train_set.data)
    inputs = prepare_path_inputs(scaled, config)
    feats = engineer_decoder_features(scaled)
    labels = train_set.labels

    batch_rng = named_stream(hyper.seed, "train", "batches")
    dropout_rng = named_stream(hyper.seed, "train", "dropout")
    state = AdamState(model)
    params = model.parameters()

    n = len(train_set)
    loss_curve: list[float] = []
    step = 0
    while step < hyper.max_steps:
        order = batch_rng.permutation(n)
        for lo in range(0, n, hyper.batch_size):
            if step >= hyper.max_steps:
                break
            idx = order[lo : lo + hyper.batch_size]
            batch_inputs = {path: arr[idx] for path, arr in inputs.items()}
            with Tape():
                logits = model_logits(model, batch_inputs, feats[idx],
                                      training=True, rng=dropout_rng)
                loss = T.cross_entropy(logits, labels[idx])
                backward(loss, params=params)
            step += 1
            adam_step(model, state, step, lr_schedule(step, config.d_model, hyper.warmup_steps), hyper)
            zero_grads(params)
            loss_curve.append(loss.item())

    classifier = Classifier(model=model, scaler=scaler)
    test_cc, test_acc, confusion = evaluate(classifier, test_set)
    report = TrainReport(
        model_config=config,
        hyper=hyper,
        steps=step,
        n_train=n,
        n_test=len(test_set),
        loss_curve=loss_curve,
        test_cc=test_cc,
        test_accuracy=test_acc,
        confusion=confusion,
        wall_time_s=time.perf_counter() - started,
    )
    return report, classifier


def _run_one(config: ModelConfig, hyper: TrainHyper,
             train_set: WindowedDataset, test_set: WindowedDataset, seed: int) -> TrainReport:
    model = init_model(config, seed=seed)
    report, _ = train(model, train_set, test_set, replace(hyper, seed=seed))
    return report


def run_repeated(
    config: ModelConfig,
    hyper: TrainHyper,
    train_set: WindowedDataset,
    test_set: WindowedDataset,
    n: int = 20,
    workers: int = 1,
) -> RunStats:
    """Train ``n`` independent repetitions, re-seeding init and batches.

    Run r uses seed ``hyper.seed + r`` for both initialization and the
    training streams; the datasets are shared. Results are identical for
    any ``workers`` value, only wall time changes.
    """
    if n < 1:
        raise UsageError(f"need at least one repetition, got {n}")
    seeds = [hyper.seed + r for r in range(n)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(
                lambda s: _run_one(config, hyper, train_set, test_set, s), seeds))
    else:
        reports = [_run_one(config, hyper, train_set, test_set, s) for s in seeds]
    return RunStats(ccs=[r.test_cc for r in reports], reports=reports)


ABLATION_VARIANTS: tuple[tuple[str, ...], ...] = (
    ("time",),
    ("sensor",),
    ("frequency",),
    ("time", "sensor"),
    ("time", "frequency"),
    ("sensor", "frequency"),
    ("time", "sensor", "frequency"),
)


def variant_label(paths: tuple[str, ...]) -> str:
    return "(" + "".join(p[0].upper() for p in paths) + ")"


@dataclass
class AblationRow:
    paths: tuple[str, ...]
    label: str
    test_cc: float
    test_accuracy: float


def ablate(
    config: ModelConfig,
    hyper: TrainHyper,
    train_set: WindowedDataset,
    test_set: WindowedDataset,
    workers: int = 1,
) -> list[AblationRow]:
    """Train all seven path subsets under identical seeds and data."""

    def one(paths: tuple[str, ...]) -> AblationRow:
        report = _run_one(replace(config, enabled_paths=paths), hyper,
                          train_set, test_set, hyper.seed)
        return AblationRow(paths=paths, label=variant_label(paths),
                           test_cc=report.test_cc, test_accuracy=report.test_accuracy)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, ABLATION_VARIANTS))
    return [one(paths) for paths in ABLATION_VARIANTS]


@dataclass(frozen=True)
class SearchSpace:
    """Random-search ranges; discrete choices sample uniformly."""

    d_model: tuple[int, ...] = (32, 64, 128)
    heads: tuple[int, ...] = (2, 4, 8)
    encoder_layers: tuple[int, ...] = (1, 2, 3)
    decoder_layers: tuple[int, ...] = (1, 2, 3)
    d_ffn: tuple[int, ...] = (64, 128, 256)
    dropout: tuple[float, float] = (0.0, 0.3)
    warmup_steps: tuple[float, float] = (100.0, 2000.0)  # log-uniform

    def __post_init__(self) -> None:
        if not (self.d_model and self.heads and self.encoder_layers
                and self.decoder_layers and self.d_ffn):
            raise UsageError("search space has an empty choice list")
        if not 0.0 <= self.dropout[0] <= self.dropout[1] < 1.0:
            raise UsageError(f"bad dropout range {self.dropout}")
        if not 0 < self.warmup_steps[0] <= self.warmup_steps[1]:
            raise UsageError(f"bad warmup range {self.warmup_steps}")


@dataclass
class SearchTrial:
    index: int
    config: ModelConfig
    hyper: TrainHyper
    test_cc: float


@dataclass
class SearchResult:
    best: SearchTrial
    trials: list[SearchTrial]

    def to_json_dict(self) -> dict:
        def trial_dict(t: SearchTrial) -> dict:
            return {
                "index": t.index,
                "model": _config_dict(t.config),
                "hyper": _hyper_dict(t.hyper),
                "test_cc": t.test_cc,
            }

        return {
            "schema_version": 1,
            "budget": len(self.trials),
            "best": trial_dict(self.best),
            "trials": [trial_dict(t) for t in self.trials],
        }


def random_search(
    base_config: ModelConfig,
    base_hyper: TrainHyper,
    train_set: WindowedDataset,
    test_set: WindowedDataset,
    budget: int,
    seed: int,
    space: SearchSpace = SearchSpace(),
    workers: int = 1,
) -> SearchResult:
    """Sample ``budget`` configurations and return the lowest test CC.

    Proposals draw from one named stream keyed by the search seed, so the
    candidate list is a pure function of (seed, budget, space). Trial r
    trains with run seed ``seed + r``. Ties keep the earliest trial.
    """
    if budget < 1:
        raise UsageError(f"search budget must be >= 1, got {budget}")
    rng = named_stream(seed, "search", "proposals")
    candidates: list[tuple[ModelConfig, TrainHyper]] = []
    for index in range(budget):
        d_model = int(space.d_model[rng.integers(len(space.d_model))])
        heads = int(space.heads[rng.integers(len(space.heads))])
        while d_model % heads != 0:  # resample until the head count divides
            heads = int(space.heads[rng.integers(len(space.heads))])
        config = replace(
            base_config,
            d_model=d_model,
            heads=heads,
            encoder_layers=int(space.encoder_layers[rng.integers(len(space.encoder_layers))]),
            decoder_layers=int(space.decoder_layers[rng.integers(len(space.decoder_layers))]),
            d_ffn=int(space.d_ffn[rng.integers(len(space.d_ffn))]),
            dropout=float(rng.uniform(*space.dropout)),
        )
        warmup = int(round(math.exp(rng.uniform(math.log(space.warmup_steps[0]),
                                                math.log(space.warmup_steps[1])))))
        hyper = replace(base_hyper, warmup_steps=warmup, seed=seed + index)
        candidates.append((config, hyper))

    def one(item: tuple[int, tuple[ModelConfig, TrainHyper]]) -> SearchTrial:
        index, (config, hyper) = item
        report = _run_one(config, hyper, train_set, test_set, hyper.seed)
        return SearchTrial(index=index, config=config, hyper=hyper, test_cc=report.test_cc)

    items = list(enumerate(candidates))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(one, items))
    else:
        trials = [one(item) for item in items]

    best = trials[0]
    for trial in trials[1:]:
        if trial.test_cc < best.test_cc:
            best = trial
    return SearchResult(best=best, trials=trials)


def confusion_csv(confusion: np.ndarray, class_names: tuple[str, ...]) -> str:
    """Row-labeled CSV: header of predicted classes, one row per true class.

    Cells use shortest round-trip float formatting so a parsed row sums
    to 1 with the same fidelity as the in-memory matrix.
    """
    if confusion.shape != (len(class_names), len(class_names)):
        raise UsageError(f"confusion {confusion.shape} does not match {len(class_names)} classes")
    lines = ["true\\pred," + ",".join(class_names)]
    for name, row in zip(class_names, confusion):
        lines.append(name + "," + ",".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def ablation_csv(rows: list[AblationRow]) -> str:
    """Seven-variant table: one indicator column per path, then the CC."""
    lines = ["time_domain,sensor_domain,frequency_domain,test_cc"]
    for row in rows:
        marks = ",".join("1" if p in row.paths else "0" for p in ("time", "sensor", "frequency"))
        lines.append(f"{marks},{row.test_cc:.6f}")
    return "\n".join(lines) + "\n"
