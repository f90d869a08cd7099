"""Declarative model specs for the simple, wide and streaming networks.

A spec is plain data (JSON-serializable); parameters live in a flat dict
keyed ``stream{s}.conv{i}.kernel|bias`` and ``head.dense{j}.weight|bias``.
The simple net is a single unsliced stream, so its keys coincide with those
of a one-stream streaming net and states can be exchanged between them.
"""

from __future__ import annotations

import contextvars
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError, SpatialCollapseError
from .imaging import SliceBand, is_partition, slice_image

BASE_CONV_STACK = ((32, 7), (64, 5), (128, 3), (256, 1))
DEFAULT_FINAL_FILTERS = 4
CIFAR10_FINAL_FILTERS = 10

CHECKPOINT_MAGIC = b"SNET"
CHECKPOINT_VERSION = 1
VARIANTS = ("simple", "wide", "streaming")


@dataclass(frozen=True)
class ConvLayer:
    filters: int
    kernel: int


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    num_classes: int
    conv_layers: tuple[ConvLayer, ...]
    bands: tuple[SliceBand, ...] | None = None
    hidden_dense: tuple[int, ...] = ()
    variant: str = "simple"

    @property
    def n_streams(self) -> int:
        return 1 if self.bands is None else len(self.bands)

    def stream_feature_shape(self) -> tuple[int, int, int]:
        """(C, H, W) of one stream's output; raises if any pool would collapse."""
        c, h, w = self.input_shape
        for i, layer in enumerate(self.conv_layers):
            if h < 2 or w < 2:
                raise SpatialCollapseError(
                    f"spatial collapse before block {i + 1}: feature map is {h}x{w}, pooling needs >= 2x2"
                )
            c, h, w = layer.filters, h // 2, w // 2
        return c, h, w

    @property
    def stream_features(self) -> int:
        c, h, w = self.stream_feature_shape()
        return c * h * w

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter key -> shape, in canonical (checkpoint) order."""
        shapes: dict[str, tuple[int, ...]] = {}
        for s in range(self.n_streams):
            cin = self.input_shape[0]
            for i, layer in enumerate(self.conv_layers):
                shapes[f"stream{s}.conv{i}.kernel"] = (layer.filters, cin, layer.kernel, layer.kernel)
                shapes[f"stream{s}.conv{i}.bias"] = (layer.filters,)
                cin = layer.filters
        dims = [self.n_streams * self.stream_features, *self.hidden_dense, self.num_classes]
        for j, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            shapes[f"head.dense{j}.weight"] = (din, dout)
            shapes[f"head.dense{j}.bias"] = (dout,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def conv_param_count(self) -> int:
        return sum(int(np.prod(s)) for k, s in self.param_shapes().items() if k.startswith("stream"))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "conv_layers": [[l.filters, l.kernel] for l in self.conv_layers],
            "bands": None if self.bands is None else [b.to_list() for b in self.bands],
            "hidden_dense": list(self.hidden_dense),
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        bands = d.get("bands")
        return cls(
            input_shape=tuple(int(v) for v in d["input_shape"]),
            num_classes=int(d["num_classes"]),
            conv_layers=tuple(ConvLayer(int(f), int(k)) for f, k in d["conv_layers"]),
            bands=None if bands is None else tuple(SliceBand(float(lo), float(hi)) for lo, hi in bands),
            hidden_dense=tuple(int(v) for v in d.get("hidden_dense", ())),
            variant=str(d.get("variant", "simple")),
        )


def _check_input_shape(input_shape, n_blocks: int) -> tuple[int, int, int]:
    if len(input_shape) != 3:
        raise ShapeError(f"input_shape must be (C, H, W), got {input_shape}")
    c, h, w = (int(v) for v in input_shape)
    factor = 2 ** n_blocks
    for name, side in (("height", h), ("width", w)):
        if side % factor:
            raise SpatialCollapseError(
                f"spatial collapse: input {name} {side} is not divisible by {factor} "
                f"({n_blocks} conv+pool blocks)"
            )
    return c, h, w


def _conv_stack(final_conv_filters: int, width_multiplier: int) -> tuple[ConvLayer, ...]:
    if width_multiplier < 1:
        raise ConfigError("width_multiplier must be >= 1")
    layers = (*BASE_CONV_STACK, (final_conv_filters, 1))
    return tuple(ConvLayer(width_multiplier * f, k) for f, k in layers)


def build_simple_convnet(
    input_shape,
    num_classes: int,
    final_conv_filters: int = DEFAULT_FINAL_FILTERS,
    width_multiplier: int = 1,
) -> ModelSpec:
    """Five conv(same)->relu->maxpool blocks, flatten, dense to class logits.

    ``width_multiplier`` scales every conv layer's filter count, the last
    one included; ``width_multiplier=5`` gives the wide baseline.
    """
    layers = _conv_stack(final_conv_filters, width_multiplier)
    shape = _check_input_shape(input_shape, len(layers))
    variant = "simple" if width_multiplier == 1 else "wide"
    return ModelSpec(shape, int(num_classes), layers, None, (), variant)


def build_wide_convnet(input_shape, num_classes: int, final_conv_filters: int = DEFAULT_FINAL_FILTERS,
                       multiplier: int = 5) -> ModelSpec:
    return build_simple_convnet(input_shape, num_classes, final_conv_filters, multiplier)


def validate_bands(bands: Sequence[SliceBand]) -> None:
    """Bands must partition [0, 1]; extra whole-image bands are tolerated."""
    if not bands:
        raise ConfigError("a streaming net needs at least one band")
    partial = [b for b in bands if not b.is_full]
    if partial and not is_partition(partial):
        raise ConfigError(
            "bands must be pairwise disjoint and cover [0, 1] exactly "
            f"(got {[b.to_list() for b in bands]})"
        )


def build_streaming_net(
    input_shape,
    num_classes: int,
    bands: Sequence[SliceBand],
    final_conv_filters: int = DEFAULT_FINAL_FILTERS,
    hidden_dense: Sequence[int] = (),
) -> ModelSpec:
    """One cloned simple-net conv stack per band; features concatenated in band order."""
    bands = tuple(bands)
    validate_bands(bands)
    layers = _conv_stack(final_conv_filters, 1)
    shape = _check_input_shape(input_shape, len(layers))
    hidden = tuple(int(h) for h in hidden_dense)
    if any(h < 1 for h in hidden):
        raise ConfigError("hidden dense sizes must be positive")
    return ModelSpec(shape, int(num_classes), layers, bands, hidden, "streaming")


# parameters -----------------------------------------------------------------

def init_state(spec: ModelSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.

    The output (logit) layer starts at zero, so the initial loss is exactly
    ln K. With random logits the quickest way down for the optimizer is to
    switch off the narrow last conv layer, after which nothing learns.
    """
    rng = np.random.default_rng(seed)
    state: dict[str, np.ndarray] = {}
    logit_layer = f"head.dense{len(spec.hidden_dense)}.weight"
    for key, shape in spec.param_shapes().items():
        if key.endswith(".bias") or key == logit_layer:
            state[key] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if key.endswith(".kernel") else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        state[key] = rng.uniform(-bound, bound, size=shape)
    return state


def check_state(spec: ModelSpec, state: Mapping[str, object]) -> None:
    shapes = spec.param_shapes()
    if set(shapes) != set(state):
        missing = sorted(set(shapes) - set(state))
        extra = sorted(set(state) - set(shapes))
        raise ShapeError(f"state keys disagree with spec (missing={missing}, unexpected={extra})")
    for key, shape in shapes.items():
        got = tuple(np.shape(state[key].data if isinstance(state[key], T.Tensor) else state[key]))
        if got != shape:
            raise ShapeError(f"{key}: expected shape {shape}, got {got}")


def resolve_threads(n_threads: int | None = None) -> int:
    """Worker cap from the argument or ``STREAMNET_THREADS`` (0 = one per CPU)."""
    if n_threads is None:
        n_threads = int(os.environ.get("STREAMNET_THREADS", "1") or 0)
    if n_threads <= 0:
        n_threads = os.cpu_count() or 1
    return n_threads


# forward ----------------------------------------------------------------------

def stream_forward(spec: ModelSpec, params: Mapping, stream: int, batch) -> T.Tensor:
    """Flattened block-5 features of one stream."""
    x = np.asarray(batch.data if isinstance(batch, T.Tensor) else batch, dtype=np.float64)
    if spec.bands is not None:
        x = slice_image(x, spec.bands[stream])
    h = T.Tensor(x)
    for i in range(len(spec.conv_layers)):
        h = T.conv2d(h, params[f"stream{stream}.conv{i}.kernel"], params[f"stream{stream}.conv{i}.bias"])
        h = T.maxpool2x2(T.relu(h))
    return T.flatten(h)


def forward(spec: ModelSpec, params: Mapping, batch, n_threads: int | None = None) -> T.Tensor:
    """Logits ``(N, num_classes)`` for a normalized ``(N, C, H, W)`` batch.

    ``params`` maps keys to :class:`Tensor` (trainable) or plain arrays.
    Streams are independent until the concat, so with more than one worker
    they are built concurrently; results do not depend on the worker count.
    """
    shape = tuple(np.shape(batch.data if isinstance(batch, T.Tensor) else batch))
    if len(shape) != 4 or shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {shape} does not match (N, {', '.join(map(str, spec.input_shape))})")
    workers = min(resolve_threads(n_threads), spec.n_streams)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            futures = [
                pool.submit(contextvars.copy_context().run, stream_forward, spec, params, s, batch)
                for s in range(spec.n_streams)
            ]
            feats = [f.result() for f in futures]
    else:
        feats = [stream_forward(spec, params, s, batch) for s in range(spec.n_streams)]
    h = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
    n_dense = len(spec.hidden_dense) + 1
    for j in range(n_dense):
        h = T.dense(h, params[f"head.dense{j}.weight"], params[f"head.dense{j}.bias"])
        if j < n_dense - 1:
            h = T.relu(h)
    return h


def predict_logits(spec: ModelSpec, state: Mapping, images, batch_size: int = 256,
                   n_threads: int | None = None) -> np.ndarray:
    """Gradient-free forward over ``images`` in chunks."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(forward(spec, state, images[start:start + batch_size], n_threads).data)
    if not out:
        return np.zeros((0, spec.num_classes))
    return np.concatenate(out, axis=0)


# checkpoints ------------------------------------------------------------------

def checkpoint_bytes(spec: ModelSpec, state: Mapping) -> bytes:
    """``SNET`` | u16 version | u32 json length | spec json | float32 LE params in key order."""
    check_state(spec, state)
    meta = json.dumps(spec.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(meta)), meta]
    for key in spec.param_shapes():
        value = state[key]
        arr = value.data if isinstance(value, T.Tensor) else value
        parts.append(np.asarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_size(spec: ModelSpec) -> int:
    meta = json.dumps(spec.to_dict(), sort_keys=True).encode("utf-8")
    return len(CHECKPOINT_MAGIC) + 6 + len(meta) + 4 * spec.param_count()


def parse_checkpoint(buf: bytes) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    if len(buf) < 10:
        raise FormatError("checkpoint truncated: header incomplete")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} (expected {CHECKPOINT_MAGIC!r}, version {CHECKPOINT_VERSION})")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    offset = 10 + meta_len
    if len(buf) < offset:
        raise FormatError("checkpoint truncated inside spec block")
    try:
        spec = ModelSpec.from_dict(json.loads(buf[10:offset].decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable spec block: {exc}") from exc
    expected = offset + 4 * spec.param_count()
    if len(buf) != expected:
        raise FormatError(
            f"checkpoint payload has {len(buf) - offset} bytes, spec shapes require {expected - offset}"
        )
    state = {}
    for key, shape in spec.param_shapes().items():
        n = int(np.prod(shape))
        state[key] = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * n
    return spec, state


def save_checkpoint(spec: ModelSpec, state: Mapping, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(spec, state))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
