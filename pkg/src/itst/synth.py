"""Synthetic EDFA condition-monitoring data with injected fault signatures.

The generator emulates a two-stage amplifier with a mid-stage VOA and 34
monitored channels. Each window is one steady operating point (input
power drawn from -35..1 dBm, gain setpoint from the 19..35 dB grid in
1 dB steps) plus per-channel Gaussian sensor noise, and, for faulty
classes, one injected signature. Dynamics are invented but designed so
the twelve classes stress the three encoder aspects differently:

* Step pairs (8, 9) and (10, 11) are sign flips of one shared, zero-mean,
  quadratic-detrended transient. Negating a zero-DC perturbation leaves
  the distribution of 2-D spectral magnitudes unchanged (the symmetric
  sensor noise absorbs the sign), and the detrending pins every statistic
  token, so only time or sensor tokens can read the polarity.
* Oscillation pairs (3, 4) and (5, 6) share one channel set and differ
  only in loop frequency, one DFT bin apart, with a random phase per
  window. Statistic tokens are identical across the pair and time-domain
  traces require phase-invariant frequency discrimination, while the
  spectrum shows disjoint peak rows.
* The pump classes exercise the remaining modes as singletons: a slow
  zero-mean drift on pump 1 and broadband noise inflation on pump 2.
* Every injected profile is zero-mean in time, keeping window means
  pinned, as an automatic gain control loop would.

Every window draws from its own named random stream keyed by
(seed, split, label, index), so train and test are disjoint by
construction and any window can be regenerated in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LabelError, UsageError
from .features import WindowedDataset
from .rng import named_stream

__all__ = [
    "ChannelSpec",
    "FaultSignature",
    "GenConfig",
    "CHANNELS",
    "CHANNEL_INDEX",
    "CLASS_NAMES",
    "NUM_CLASSES",
    "DESK_SCALE",
    "class_signature_table",
    "signature_for",
    "inject_fault",
    "generate_dataset",
]

FAULT_MODES = ("none", "linear_drift", "oscillation", "offset_step", "variance_inflation", "gain_tilt")

INPUT_POWER_RANGE = (-35.0, 1.0)  # dBm, total input
GAIN_SETPOINTS = tuple(float(g) for g in range(19, 36))  # dB, 1 dB grid


@dataclass(frozen=True)
class ChannelSpec:
    """One monitored quantity: catalog name, role, nominal level, noise."""

    name: str
    role: str
    nominal: float
    noise_sigma: float


CHANNELS: tuple[ChannelSpec, ...] = (
    ChannelSpec("stage1_input_power", "power", -17.6, 0.02),
    ChannelSpec("stage1_output_power", "power", -3.1, 0.03),
    ChannelSpec("stage2_input_power", "power", -5.3, 0.03),
    ChannelSpec("stage2_output_power", "power", 9.0, 0.03),
    ChannelSpec("pump1_current", "pump", 135.0, 0.15),
    ChannelSpec("pump1_power", "pump", 14.8, 0.08),
    ChannelSpec("pump1_temperature", "pump", 43.5, 0.02),
    ChannelSpec("pump2_current", "pump", 125.0, 0.15),
    ChannelSpec("pump2_power", "pump", 13.9, 0.08),
    ChannelSpec("pump2_temperature", "pump", 43.1, 0.02),
    ChannelSpec("detector1_reading", "detector", -37.6, 0.05),
    ChannelSpec("detector2_reading", "detector", -23.1, 0.05),
    ChannelSpec("detector3_reading", "detector", -25.3, 0.05),
    ChannelSpec("detector4_reading", "detector", -11.0, 0.05),
    ChannelSpec("voa_attenuation", "voa", 2.4, 0.02),
    ChannelSpec("voa_drive_current", "voa", 20.4, 0.10),
    ChannelSpec("case_temperature", "temperature", 32.5, 0.02),
    ChannelSpec("channel_01_power", "wdm", -0.5, 0.04),
    ChannelSpec("channel_02_power", "wdm", -0.5, 0.04),
    ChannelSpec("channel_03_power", "wdm", -0.5, 0.04),
    ChannelSpec("channel_04_power", "wdm", -0.5, 0.04),
    ChannelSpec("channel_05_power", "wdm", -0.5, 0.04),
    ChannelSpec("channel_06_power", "wdm", -0.5, 0.04),
    ChannelSpec("channel_07_power", "wdm", -0.5, 0.04),
    ChannelSpec("channel_08_power", "wdm", -0.5, 0.04),
    ChannelSpec("channel_09_power", "wdm", -0.5, 0.04),
    ChannelSpec("total_gain", "derived", 27.0, 0.02),
    ChannelSpec("gain_tilt", "derived", 0.0, 0.02),
    ChannelSpec("gain_setpoint", "setpoint", 27.0, 0.005),
    ChannelSpec("input_power_setpoint", "setpoint", -17.0, 0.01),
    ChannelSpec("supply_voltage", "aux", 12.0, 0.005),
    ChannelSpec("ase_power", "aux", -18.6, 0.05),
    ChannelSpec("backreflection", "aux", -32.6, 0.05),
    ChannelSpec("controller_duty", "aux", 72.8, 0.03),
)

CHANNEL_INDEX: dict[str, int] = {spec.name: i for i, spec in enumerate(CHANNELS)}
NUM_CHANNELS = len(CHANNELS)
WDM_NAMES = tuple(spec.name for spec in CHANNELS if spec.role == "wdm")

CLASS_NAMES: tuple[str, ...] = (
    "Normal",
    "Pump laser 1",
    "Pump laser 2",
    "Power detector 1",
    "Power detector 2",
    "Power detector 3",
    "Power detector 4",
    "VOA",
    "Passive components 1",
    "Passive components 2",
    "Passive components 3",
    "Passive components 4",
)
NUM_CLASSES = len(CLASS_NAMES)

# 128 train / 63 test windows per class at the default per-class counts.
DESK_SCALE = 0.0441


@dataclass(frozen=True)
class FaultSignature:
    """How one fault class perturbs the monitored channels.

    ``channels`` pairs catalog names with signed weights in natural
    units; ``severity`` scales every weight and is itself multiplied by
    the per-window severity draw. ``frequency`` (cycles per window) is
    set only for oscillation modes.
    """

    label: int
    name: str
    mode: str
    channels: tuple[tuple[str, float], ...]
    severity: float = 1.0
    frequency: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in FAULT_MODES:
            raise UsageError(f"unknown fault mode {self.mode!r}")
        if (self.frequency is not None) != (self.mode == "oscillation"):
            raise UsageError(f"frequency must be set exactly for oscillation modes ({self.name})")
        for name, _ in self.channels:
            if name not in CHANNEL_INDEX:
                raise UsageError(f"signature {self.name} references unknown channel {name!r}")


_LOOP1 = (("detector1_reading", 14.0), ("detector2_reading", 14.0), ("pump1_current", 21.0), ("stage1_output_power", 10.0))
_LOOP2 = (("detector3_reading", 14.0), ("detector4_reading", 14.0), ("pump2_current", 21.0), ("stage2_output_power", 10.0))

_SIGNATURES: tuple[FaultSignature, ...] = (
    FaultSignature(0, CLASS_NAMES[0], "none", ()),
    FaultSignature(
        1, CLASS_NAMES[1], "linear_drift",
        (("pump1_current", 18.0), ("pump1_power", -1.4), ("pump1_temperature", 0.9)),
    ),
    FaultSignature(
        2, CLASS_NAMES[2], "variance_inflation",
        (("pump2_current", 6.0), ("pump2_power", 1.2)),
    ),
    FaultSignature(3, CLASS_NAMES[3], "oscillation", _LOOP1, frequency=13.0),
    FaultSignature(4, CLASS_NAMES[4], "oscillation", _LOOP1, frequency=14.0),
    FaultSignature(5, CLASS_NAMES[5], "oscillation", _LOOP2, frequency=17.0),
    FaultSignature(6, CLASS_NAMES[6], "oscillation", _LOOP2, frequency=18.0),
    FaultSignature(
        7, CLASS_NAMES[7], "gain_tilt",
        tuple((name, 4.5) for name in WDM_NAMES)
        + (("gain_tilt", 2.5), ("voa_attenuation", 0.8)),
    ),
    FaultSignature(
        8, CLASS_NAMES[8], "offset_step",
        (("stage1_output_power", -5.0), ("detector2_reading", -5.0)),
    ),
    FaultSignature(
        9, CLASS_NAMES[9], "offset_step",
        (("stage1_output_power", 5.0), ("detector2_reading", 5.0)),
    ),
    FaultSignature(
        10, CLASS_NAMES[10], "offset_step",
        (("stage2_output_power", -5.0), ("detector4_reading", -5.0)),
    ),
    FaultSignature(
        11, CLASS_NAMES[11], "offset_step",
        (("stage2_output_power", 5.0), ("detector4_reading", 5.0)),
    ),
)


def class_signature_table() -> tuple[FaultSignature, ...]:
    """The twelve fault signatures, indexed by class label."""
    return _SIGNATURES


@dataclass(frozen=True)
class GenConfig:
    """Synthesis parameters; ``scale`` shrinks per-class window counts."""

    seed: int
    scale: float = 1.0
    window: int = 40
    train_per_class: int = 2905
    test_per_class: int = 1432

    def __post_init__(self) -> None:
        if not self.scale > 0.0:
            raise UsageError(f"scale must be positive, got {self.scale}")
        if self.window < 4:
            raise UsageError(f"window must be >= 4, got {self.window}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise UsageError("per-class window counts must be >= 1")

    def count_for(self, base: int) -> int:
        # round half up, so scale = m/base lands exactly on m
        return max(1, math.floor(self.scale * base + 0.5))


_NOISE_SIGMA = np.array([spec.noise_sigma for spec in CHANNELS])


def _operating_point(rng: np.random.Generator) -> np.ndarray:
    """Draw one steady-state sensor vector. Draw order is part of the
    determinism contract; never reorder these calls."""
    p_in = rng.uniform(*INPUT_POWER_RANGE)
    gain = float(GAIN_SETPOINTS[rng.integers(0, len(GAIN_SETPOINTS))])
    t_case = rng.uniform(20.0, 45.0)
    ripple = rng.normal(0.0, 0.3, size=len(WDM_NAMES))
    det_bias = rng.normal(0.0, 0.6, size=4)
    tilt_eps = rng.normal(0.0, 0.1)
    supply_eps = rng.normal(0.0, 0.02)

    g1 = 0.5 * gain + 1.0  # first-stage share of the gain budget
    g2 = gain - g1
    att = 1.4 + 0.12 * (35.0 - gain)  # VOA flattening vs setpoint
    out_total = p_in + gain - 1.0

    v = np.empty(NUM_CHANNELS)
    v[0] = p_in - 0.6
    v[1] = v[0] + g1
    v[2] = v[1] - att
    v[3] = out_total
    v[4] = 60.0 + 5.0 * g1 + 0.8 * (p_in + 35.0)
    v[5] = 8.0 + 0.09 * (v[4] - 60.0)
    v[6] = t_case + 8.0 + 0.04 * (v[4] - 60.0)
    v[7] = 60.0 + 5.0 * g2 + 0.8 * (p_in + 35.0)
    v[8] = 8.0 + 0.09 * (v[7] - 60.0)
    v[9] = t_case + 8.0 + 0.04 * (v[7] - 60.0)
    v[10] = v[0] - 20.0 + det_bias[0]
    v[11] = v[1] - 20.0 + det_bias[1]
    v[12] = v[2] - 20.0 + det_bias[2]
    v[13] = v[3] - 20.0 + det_bias[3]
    v[14] = att
    v[15] = 12.0 + 3.5 * att
    v[16] = t_case
    v[17:26] = out_total - 10.0 * math.log10(len(WDM_NAMES)) + ripple
    v[26] = gain
    v[27] = tilt_eps
    v[28] = gain
    v[29] = p_in
    v[30] = 12.0 + supply_eps
    v[31] = -28.0 + 0.35 * gain
    v[32] = -30.0 + 0.15 * p_in
    v[33] = 35.0 + 1.2 * gain + 0.3 * (p_in + 35.0)
    return v


def _base_window(window: int, rng: np.random.Generator) -> np.ndarray:
    """Steady operating point plus per-channel Gaussian sensor noise."""
    op = _operating_point(rng)
    noise = rng.normal(0.0, 1.0, size=(window, NUM_CHANNELS)) * _NOISE_SIGMA
    return op + noise


def inject_fault(
    window: np.ndarray,
    signature: FaultSignature,
    severity: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Return a copy of ``window`` with one signature injected.

    ``severity`` scales the signature weights; zero severity returns a
    bitwise-equal copy. Oscillations draw a single phase per call, shared
    by every affected channel, so loop channels stay coherent. Drift, step
    and inflation profiles are balanced to leave the window mean untouched;
    the class evidence lives in the dynamics, not in a DC shift.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[1] != NUM_CHANNELS:
        raise UsageError(f"window must be (width, {NUM_CHANNELS}), got {window.shape}")
    if severity < 0.0:
        raise UsageError(f"severity must be non-negative, got {severity}")
    out = window.copy()
    if signature.mode == "none":
        return out

    width = out.shape[0]
    t = np.arange(width, dtype=np.float64)
    amp = severity * signature.severity

    if signature.mode == "linear_drift":
        profile = t / (width - 1) - 0.5  # zero-mean ramp
        for name, weight in signature.channels:
            out[:, CHANNEL_INDEX[name]] += amp * weight * profile
    elif signature.mode == "oscillation":
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.sin(2.0 * np.pi * signature.frequency * t / width + phase)
        for name, weight in signature.channels:
            out[:, CHANNEL_INDEX[name]] += amp * weight * wave
    elif signature.mode == "offset_step":
        # Level shift at mid-window with the least-squares quadratic removed,
        # so mean, slope and curvature summaries are left exactly untouched
        # and only the transient's shape (and its polarity) carries the class.
        profile = np.where(t < width // 2, 1.0, -1.0)
        vand = np.vander(t, 3, increasing=True)
        coef, *_ = np.linalg.lstsq(vand, profile, rcond=None)
        profile = profile - vand @ coef
        for name, weight in signature.channels:
            out[:, CHANNEL_INDEX[name]] += amp * weight * profile
    elif signature.mode == "variance_inflation":
        for name, weight in signature.channels:
            noise = rng.normal(0.0, 1.0, size=width)
            noise -= noise.mean()
            out[:, CHANNEL_INDEX[name]] += noise * (amp * abs(weight))
    elif signature.mode == "gain_tilt":
        wdm_members = [name for name, _ in signature.channels if name in WDM_NAMES]
        slopes = {name: s for name, s in zip(wdm_members, np.linspace(-1.0, 1.0, len(wdm_members)))}
        for name, weight in signature.channels:
            out[:, CHANNEL_INDEX[name]] += amp * weight * slopes.get(name, 1.0)
    else:  # pragma: no cover - FaultSignature validates modes
        raise UsageError(f"unknown fault mode {signature.mode!r}")
    return out


def _synth_window(cfg: GenConfig, split: str, label: int, index: int) -> np.ndarray:
    rng = named_stream(cfg.seed, "synth", split, label, index)
    base = _base_window(cfg.window, rng)
    sig = _SIGNATURES[label]
    if sig.mode == "none":
        return base
    severity = rng.uniform(0.3, 1.0)
    return inject_fault(base, sig, severity, rng)


def generate_dataset(cfg: GenConfig) -> tuple[WindowedDataset, WindowedDataset]:
    """Synthesize the (train, test) window datasets for all 12 classes.

    Windows are laid out class-major: all label-0 windows first, then
    label 1, and so on. Train and test use disjoint named streams.
    """
    splits = {}
    for split, base_count in (("train", cfg.train_per_class), ("test", cfg.test_per_class)):
        per_class = cfg.count_for(base_count)
        data = np.empty((NUM_CLASSES * per_class, cfg.window, NUM_CHANNELS))
        labels = np.empty(NUM_CLASSES * per_class, dtype=np.int64)
        row = 0
        for label in range(NUM_CLASSES):
            for index in range(per_class):
                data[row] = _synth_window(cfg, split, label, index)
                labels[row] = label
                row += 1
        splits[split] = WindowedDataset(data, labels)
    return splits["train"], splits["test"]


def signature_for(label: int) -> FaultSignature:
    """Look up a signature by class label."""
    if not 0 <= label < NUM_CLASSES:
        raise LabelError(f"label {label} outside [0, {NUM_CLASSES})")
    return _SIGNATURES[label]
