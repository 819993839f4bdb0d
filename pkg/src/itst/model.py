"""The inverse triple-aspect self-attention transformer.

Three parallel encoder paths read one scaled window from different
aspects: *time* tokens are the W row vectors (one per sample instant),
*sensor* tokens are the k transposed column traces (one per channel),
and *frequency* tokens are the rows of the 2-D DFT magnitude map. Each
path projects its tokens to d_model, adds sinusoidal positions, and runs
its own post-norm encoder stack. The concatenated path outputs form the
memory: W + k + W = 114 tokens at the default 40x34 geometry.

The decoder side is the "inverse" part: instead of autoregressive
queries it decodes five engineered statistic tokens (per-channel mean,
variance, and quadratic trend coefficients) through unmasked
self-attention plus cross-attention over the memory. Mean-pooling the
decoded tokens and applying a linear head yields the 12-way logits.

All blocks are post-norm (sublayer, add, layer norm), FFNs use ReLU,
weights draw Glorot-uniform values from per-parameter named streams so
any path's initialization is independent of which other paths exist,
and biases start at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError
from .features import engineer_decoder_features, fft2d_magnitude
from .rng import named_stream
from .tensor import Tensor

__all__ = [
    "PATHS",
    "ModelConfig",
    "ItstModel",
    "init_model",
    "param_count",
    "sinusoidal_encoding",
    "multi_head_attention",
    "prepare_path_inputs",
    "encoder_forward",
    "decoder_forward",
    "model_logits",
    "classify",
    "classify_batch",
]

PATHS = ("time", "sensor", "frequency")
DECODER_TOKENS = 5


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults match the reference setup."""

    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    d_ffn: int = 128
    dropout: float = 0.1
    num_classes: int = 12
    window: int = 40
    features: int = 34
    enabled_paths: tuple[str, ...] = PATHS

    def __post_init__(self) -> None:
        if self.d_model < 1 or self.d_model % self.heads != 0:
            raise UsageError(f"d_model {self.d_model} must be a positive multiple of heads {self.heads}")
        if self.heads < 1:
            raise UsageError(f"heads must be >= 1, got {self.heads}")
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise UsageError("encoder_layers and decoder_layers must be >= 1")
        if self.d_ffn < 1:
            raise UsageError(f"d_ffn must be >= 1, got {self.d_ffn}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.num_classes != 12:
            raise UsageError(f"num_classes is pinned to the 12 fault labels, got {self.num_classes}")
        if self.window < 4 or self.features < 1:
            raise UsageError(f"bad window geometry ({self.window}, {self.features})")
        paths = tuple(self.enabled_paths)
        if not paths:
            raise UsageError("at least one encoder path must be enabled")
        unknown = set(paths) - set(PATHS)
        if unknown:
            raise UsageError(f"unknown encoder paths: {sorted(unknown)}")
        if len(set(paths)) != len(paths):
            raise UsageError(f"duplicate encoder paths: {paths}")
        # store in canonical order so memory layout never depends on spelling
        object.__setattr__(self, "enabled_paths", tuple(p for p in PATHS if p in paths))

    @property
    def memory_tokens(self) -> int:
        per = {"time": self.window, "sensor": self.features, "frequency": self.window}
        return sum(per[p] for p in self.enabled_paths)

    def path_input_width(self, path: str) -> int:
        if path == "sensor":
            return self.window
        return self.features


@dataclass
class ItstModel:
    """A parameter set plus the config describing its wiring."""

    config: ModelConfig
    params: dict[str, Tensor]
    seed: int
    pos: np.ndarray = field(repr=False, default=None)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table: (length, d_model)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d_model)
    enc = np.empty((length, d_model))
    enc[:, 0::2] = np.sin(angle[:, 0::2])
    enc[:, 1::2] = np.cos(angle[:, 1::2])
    return enc


def _param_names(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Deterministic (name, shape, kind) listing; kind picks the init rule."""
    d, f = config.d_model, config.d_ffn
    names: list[tuple[str, tuple[int, ...], str]] = []

    def attn(prefix: str) -> None:
        for part in ("q", "k", "v", "o"):
            names.append((f"{prefix}.{part}.w", (d, d), "glorot"))
            names.append((f"{prefix}.{part}.b", (d,), "zeros"))

    def norm(prefix: str) -> None:
        names.append((f"{prefix}.g", (d,), "ones"))
        names.append((f"{prefix}.b", (d,), "zeros"))

    def ffn(prefix: str) -> None:
        names.append((f"{prefix}.w1", (d, f), "glorot"))
        names.append((f"{prefix}.b1", (f,), "zeros"))
        names.append((f"{prefix}.w2", (f, d), "glorot"))
        names.append((f"{prefix}.b2", (d,), "zeros"))

    for path in config.enabled_paths:
        width = config.path_input_width(path)
        names.append((f"enc.{path}.proj.w", (width, d), "glorot"))
        names.append((f"enc.{path}.proj.b", (d,), "zeros"))
        for layer in range(config.encoder_layers):
            attn(f"enc.{path}.{layer}.attn")
            norm(f"enc.{path}.{layer}.norm1")
            ffn(f"enc.{path}.{layer}.ffn")
            norm(f"enc.{path}.{layer}.norm2")

    names.append(("dec.proj.w", (config.features, d), "glorot"))
    names.append(("dec.proj.b", (d,), "zeros"))
    for layer in range(config.decoder_layers):
        attn(f"dec.{layer}.self_attn")
        norm(f"dec.{layer}.norm1")
        attn(f"dec.{layer}.cross_attn")
        norm(f"dec.{layer}.norm2")
        ffn(f"dec.{layer}.ffn")
        norm(f"dec.{layer}.norm3")

    names.append(("head.w", (d, config.num_classes), "glorot"))
    names.append(("head.b", (config.num_classes,), "zeros"))
    return names


def init_model(config: ModelConfig, seed: int) -> ItstModel:
    """Build a model with Glorot-uniform weights and zero biases.

    Each parameter draws from its own stream keyed by (seed, "init",
    name), so adding or removing encoder paths leaves every shared
    parameter's initialization untouched.
    """
    params: dict[str, Tensor] = {}
    for name, shape, kind in _param_names(config):
        if kind == "glorot":
            fan_in, fan_out = shape[0], shape[1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            rng = named_stream(seed, "init", name)
            data = rng.uniform(-limit, limit, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    max_tokens = max(config.window, config.features, DECODER_TOKENS)
    pos = sinusoidal_encoding(max_tokens, config.d_model)
    return ItstModel(config=config, params=params, seed=seed, pos=pos)


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter census for a config."""
    d, f = config.d_model, config.d_ffn
    attn = 4 * (d * d + d)
    norm = 2 * d
    ffn = d * f + f + f * d + d
    enc_layer = attn + 2 * norm + ffn
    dec_layer = 2 * attn + 3 * norm + ffn
    total = 0
    for path in config.enabled_paths:
        total += config.path_input_width(path) * d + d
        total += config.encoder_layers * enc_layer
    total += config.features * d + d
    total += config.decoder_layers * dec_layer
    total += d * config.num_classes + config.num_classes
    return total


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(B, T, in) @ (in, out) + bias, via a flatten/restore round trip."""
    batch, tokens, width = x.shape
    flat = T.reshape(x, (batch * tokens, width))
    out = T.add(T.matmul(flat, w), b)
    return T.reshape(out, (batch, tokens, w.shape[1]))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: Mapping[str, Tensor],
    heads: int,
    probe: list | None = None,
) -> Tensor:
    """Scaled dot-product attention with ``heads`` parallel heads.

    ``params`` maps "q.w", "q.b", "k.w", ... "o.b" to projection tensors.
    Inputs are (batch, tokens, d_model); 2-D inputs are treated as a
    single unbatched sequence. No masking is applied anywhere. When
    ``probe`` is a list, the row-stochastic attention weights
    (batch*heads, query tokens, key tokens) are appended to it.
    """
    squeeze = q.ndim == 2
    if squeeze:
        if k.ndim != 2 or v.ndim != 2:
            raise ShapeError(f"mixed batched/unbatched attention inputs: {q.shape}, {k.shape}, {v.shape}")
        q = T.reshape(q, (1,) + q.shape)
        k = T.reshape(k, (1,) + k.shape)
        v = T.reshape(v, (1,) + v.shape)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(f"attention expects (batch, tokens, d) inputs, got {q.shape}, {k.shape}, {v.shape}")
    if k.shape[:2] != v.shape[:2]:
        raise ShapeError(f"key/value token counts disagree: {k.shape} vs {v.shape}")

    d_model = q.shape[-1]
    if d_model % heads != 0:
        raise ShapeError(f"d_model {d_model} not divisible by {heads} heads")
    d_head = d_model // heads
    batch, tq = q.shape[0], q.shape[1]
    tk = k.shape[1]

    def split(x: Tensor, tokens: int) -> Tensor:
        x = T.reshape(x, (batch, tokens, heads, d_head))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (batch * heads, tokens, d_head))

    qh = split(_linear(q, params["q.w"], params["q.b"]), tq)
    kh = split(_linear(k, params["k.w"], params["k.b"]), tk)
    vh = split(_linear(v, params["v.w"], params["v.b"]), tk)

    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(d_head))
    weights = T.softmax(scores, axis=-1)
    if probe is not None:
        probe.append(weights.data)
    ctx = T.matmul(weights, vh)

    ctx = T.reshape(ctx, (batch, heads, tq, d_head))
    ctx = T.transpose(ctx, (0, 2, 1, 3))
    ctx = T.reshape(ctx, (batch, tq, d_model))
    out = _linear(ctx, params["o.w"], params["o.b"])
    if squeeze:
        out = T.reshape(out, (tq, d_model))
    return out


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    plen = len(prefix) + 1
    return {name[plen:]: p for name, p in params.items() if name.startswith(prefix + ".")}


def _drop(x: Tensor, config: ModelConfig, training: bool, rng) -> Tensor:
    if config.dropout == 0.0:
        return x
    return T.dropout(x, 1.0 - config.dropout, rng=rng, training=training)


def _ffn(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    batch, tokens, width = x.shape
    flat = T.reshape(x, (batch * tokens, width))
    hidden = T.relu(T.add(T.matmul(flat, p["w1"]), p["b1"]))
    out = T.add(T.matmul(hidden, p["w2"]), p["b2"])
    return T.reshape(out, (batch, tokens, p["w2"].shape[1]))


def _encoder_layer(x, params, prefix, config, training, rng, probe):
    attn = multi_head_attention(x, x, x, _sub(params, f"{prefix}.attn"), config.heads, probe)
    x = T.layer_norm(T.add(x, _drop(attn, config, training, rng)),
                     params[f"{prefix}.norm1.g"], params[f"{prefix}.norm1.b"])
    ff = _ffn(x, _sub(params, f"{prefix}.ffn"))
    x = T.layer_norm(T.add(x, _drop(ff, config, training, rng)),
                     params[f"{prefix}.norm2.g"], params[f"{prefix}.norm2.b"])
    return x


def prepare_path_inputs(windows: np.ndarray, config: ModelConfig) -> dict[str, np.ndarray]:
    """Derive per-path token arrays from scaled windows (B, W, k).

    time: the windows unchanged; sensor: channel-major transpose;
    frequency: 2-D DFT magnitude. These are model inputs, not
    parameters, so they are plain numpy arrays.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    if windows.ndim != 3 or windows.shape[1:] != (config.window, config.features):
        raise ShapeError(
            f"windows must be (batch, {config.window}, {config.features}), got {windows.shape}"
        )
    inputs: dict[str, np.ndarray] = {}
    for path in config.enabled_paths:
        if path == "time":
            inputs[path] = windows
        elif path == "sensor":
            inputs[path] = windows.transpose(0, 2, 1).copy()
        else:
            inputs[path] = fft2d_magnitude(windows)
    return inputs


def encoder_forward(
    model: ItstModel,
    path_inputs: Mapping[str, np.ndarray],
    training: bool = False,
    rng=None,
    probe: list | None = None,
) -> Tensor:
    """Run every enabled path and concatenate token outputs into memory."""
    config = model.config
    outputs = []
    for path in config.enabled_paths:
        if path not in path_inputs:
            raise UsageError(f"missing input for enabled path {path!r}")
        x = Tensor(path_inputs[path])
        if x.ndim != 3:
            raise ShapeError(f"path {path!r} input must be (batch, tokens, width), got {x.shape}")
        x = _linear(x, model.params[f"enc.{path}.proj.w"], model.params[f"enc.{path}.proj.b"])
        x = T.add(x, model.pos[: x.shape[1]])
        x = _drop(x, config, training, rng)
        for layer in range(config.encoder_layers):
            x = _encoder_layer(x, model.params, f"enc.{path}.{layer}", config, training, rng, probe)
        outputs.append(x)
    return T.concat(outputs, axis=1) if len(outputs) > 1 else outputs[0]


def decoder_forward(
    model: ItstModel,
    feats: np.ndarray,
    memory: Tensor,
    training: bool = False,
    rng=None,
    probe: list | None = None,
) -> Tensor:
    """Decode the five statistic tokens against the encoder memory."""
    config = model.config
    x = Tensor(np.asarray(feats, dtype=np.float64))
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] != DECODER_TOKENS or x.shape[2] != config.features:
        raise ShapeError(
            f"decoder features must be (batch, {DECODER_TOKENS}, {config.features}), got {x.shape}"
        )
    if memory.ndim != 3 or memory.shape[0] != x.shape[0]:
        raise ShapeError(f"memory {memory.shape} does not match feature batch {x.shape}")
    params = model.params
    x = _linear(x, params["dec.proj.w"], params["dec.proj.b"])
    x = T.add(x, model.pos[:DECODER_TOKENS])
    x = _drop(x, config, training, rng)
    for layer in range(config.decoder_layers):
        prefix = f"dec.{layer}"
        attn = multi_head_attention(x, x, x, _sub(params, f"{prefix}.self_attn"), config.heads, probe)
        x = T.layer_norm(T.add(x, _drop(attn, config, training, rng)),
                         params[f"{prefix}.norm1.g"], params[f"{prefix}.norm1.b"])
        cross = multi_head_attention(x, memory, memory, _sub(params, f"{prefix}.cross_attn"),
                                     config.heads, probe)
        x = T.layer_norm(T.add(x, _drop(cross, config, training, rng)),
                         params[f"{prefix}.norm2.g"], params[f"{prefix}.norm2.b"])
        ff = _ffn(x, _sub(params, f"{prefix}.ffn"))
        x = T.layer_norm(T.add(x, _drop(ff, config, training, rng)),
                         params[f"{prefix}.norm3.g"], params[f"{prefix}.norm3.b"])
    return x


def model_logits(
    model: ItstModel,
    path_inputs: Mapping[str, np.ndarray],
    feats: np.ndarray,
    training: bool = False,
    rng=None,
    probe: list | None = None,
) -> Tensor:
    """Full pipeline below the softmax: memory, decode, pool, head."""
    memory = encoder_forward(model, path_inputs, training, rng, probe)
    decoded = decoder_forward(model, feats, memory, training, rng, probe)
    pooled = T.mean(decoded, axis=1)
    return T.add(T.matmul(pooled, model.params["head.w"]), model.params["head.b"])


def classify_batch(model: ItstModel, windows: np.ndarray) -> np.ndarray:
    """Class probabilities for scaled windows (B, W, k) -> (B, C)."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise ShapeError(f"expected (batch, window, channels), got {windows.shape}")
    inputs = prepare_path_inputs(windows, model.config)
    feats = engineer_decoder_features(windows)
    logits = model_logits(model, inputs, feats, training=False)
    return T.softmax(logits, axis=-1).data


def classify(model: ItstModel, window: np.ndarray) -> np.ndarray:
    """Class probabilities for one scaled window (W, k) -> (C,)."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ShapeError(f"expected a single (window, channels) array, got {window.shape}")
    return classify_batch(model, window[None])[0]
