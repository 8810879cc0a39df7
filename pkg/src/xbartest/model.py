"""Network description, parameter storage, forward pass, and serialization.

A model is a flat list of layers applied in order to a single input sample.
Residual connections are expressed as ``residual-begin`` / ``residual-add``
marker layers: begin pushes the current activation onto a buffer, add pops
it and sums it with the current activation.  Pairs must be balanced and not
nested, and the skip must preserve shape.

On disk a model is a JSON manifest plus a little-endian float32 weight blob
(parameters concatenated in manifest order, followed by a CRC32 of the
payload).
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ops
from .errors import ModelFormatError, NumericError, ShapeError

FORMAT_VERSION = 1

LAYER_KINDS = frozenset({
    "linear", "conv2d", "relu", "batchnorm", "maxpool", "avgpool",
    "flatten", "residual-begin", "residual-add", "softmax",
})

# parameter names per parameterized kind, in serialization order
PARAM_FIELDS = {
    "linear": ("W", "b"),
    "conv2d": ("W", "b"),
    "batchnorm": ("mean", "var", "beta", "gamma"),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ModelFormatError(f"unknown layer kind: {self.kind!r}")


def linear(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("linear", {"in_features": in_features, "out_features": out_features})


def conv2d(in_channels: int, out_channels: int, kernel: int | tuple,
           stride: int = 1, padding: int = 0) -> LayerSpec:
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    return LayerSpec("conv2d", {"in_channels": in_channels, "out_channels": out_channels,
                                "kernel": [kh, kw], "stride": stride, "padding": padding})


def relu() -> LayerSpec:
    return LayerSpec("relu")


def batchnorm(num_features: int, eps: float = 1e-5) -> LayerSpec:
    return LayerSpec("batchnorm", {"num_features": num_features, "eps": eps})


def maxpool(size: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", {"size": size, "stride": size if stride is None else stride})


def avgpool(size: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("avgpool", {"size": size, "stride": size if stride is None else stride})


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def residual_begin() -> LayerSpec:
    return LayerSpec("residual-begin")


def residual_add() -> LayerSpec:
    return LayerSpec("residual-add")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def _propagate(layer: LayerSpec, shape: tuple, skip_shape: tuple | None) -> tuple:
    kind, h = layer.kind, layer.hyper
    if kind == "linear":
        if shape != (h["in_features"],):
            raise ShapeError(f"linear expects shape ({h['in_features']},), got {shape}")
        return (h["out_features"],)
    if kind == "conv2d":
        if len(shape) != 3 or shape[0] != h["in_channels"]:
            raise ShapeError(f"conv2d expects ({h['in_channels']},H,W), got {shape}")
        kh, kw = h["kernel"]
        st, p = h["stride"], h["padding"]
        if st < 1:
            raise ShapeError(f"conv2d stride must be >= 1, got {st}")
        oh = (shape[1] + 2 * p - kh) // st + 1
        ow = (shape[2] + 2 * p - kw) // st + 1
        if kh > shape[1] + 2 * p or kw > shape[2] + 2 * p or oh < 1 or ow < 1:
            raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {shape}")
        return (h["out_channels"], oh, ow)
    if kind == "batchnorm":
        n = h["num_features"]
        if not shape or shape[0] != n or len(shape) not in (1, 3):
            raise ShapeError(f"batchnorm({n}) does not conform to input {shape}")
        return shape
    if kind in ("maxpool", "avgpool"):
        if len(shape) != 3:
            raise ShapeError(f"pooling expects (C,H,W), got {shape}")
        size, st = h["size"], h["stride"]
        if size > shape[1] or size > shape[2]:
            raise ShapeError(f"pool window {size} larger than input {shape}")
        return (shape[0], (shape[1] - size) // st + 1, (shape[2] - size) // st + 1)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "residual-add":
        if skip_shape != shape:
            raise ShapeError(
                f"residual-add shape {shape} does not match residual-begin {skip_shape}")
        return shape
    if kind == "softmax":
        if len(shape) != 1:
            raise ShapeError(f"softmax expects a 1-D input, got {shape}")
        return shape
    # relu, residual-begin
    return shape


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    num_classes: int

    def __init__(self, input_shape, layers, num_classes):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in input_shape))
        object.__setattr__(self, "layers", tuple(layers))
        object.__setattr__(self, "num_classes", int(num_classes))
        self._validate()

    def _validate(self):
        if not self.layers:
            raise ModelFormatError("model has no layers")
        if not self.input_shape or any(d <= 0 for d in self.input_shape):
            raise ShapeError(f"input shape must be positive: {self.input_shape}")
        if self.num_classes < 1:
            raise ShapeError(f"num_classes must be positive, got {self.num_classes}")
        open_skip = False
        for i, layer in enumerate(self.layers):
            if layer.kind == "softmax" and i != len(self.layers) - 1:
                raise ModelFormatError("softmax is only allowed as the final layer")
            if layer.kind == "residual-begin":
                if open_skip:
                    raise ModelFormatError("nested residual-begin")
                open_skip = True
            elif layer.kind == "residual-add":
                if not open_skip:
                    raise ModelFormatError("residual-add without matching residual-begin")
                open_skip = False
        if open_skip:
            raise ModelFormatError("residual-begin without matching residual-add")

        shapes = self.layer_shapes()
        final = shapes[-2] if self.layers[-1].kind == "softmax" else shapes[-1]
        if len(self.layers) == 1 and self.layers[-1].kind == "softmax":
            final = self.input_shape
        if final != (self.num_classes,):
            raise ShapeError(
                f"final pre-softmax shape {final} does not match num_classes={self.num_classes}")
        if self.num_classes < 20:
            warnings.warn(
                f"num_classes={self.num_classes} gives noisy output statistics; "
                "20 or more classes are recommended", stacklevel=3)

    def layer_shapes(self) -> list[tuple]:
        """Output shape after each layer, computed before any numeric work."""
        shape = self.input_shape
        shapes = []
        skip_shape = None
        for layer in self.layers:
            shape = _propagate(layer, shape, skip_shape)
            if layer.kind == "residual-begin":
                skip_shape = shape
            elif layer.kind == "residual-add":
                skip_shape = None
            shapes.append(shape)
        return shapes

    def parameterized_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in PARAM_FIELDS]

    def weight_layers(self) -> list[int]:
        """Layers whose W tensor is mapped to crossbar cells (linear/conv2d)."""
        return [i for i, l in enumerate(self.layers) if l.kind in ("linear", "conv2d")]


def param_shapes(layer: LayerSpec) -> dict[str, tuple]:
    """Expected parameter shapes for a parameterized layer."""
    h = layer.hyper
    if layer.kind == "linear":
        return {"W": (h["out_features"], h["in_features"]), "b": (h["out_features"],)}
    if layer.kind == "conv2d":
        kh, kw = h["kernel"]
        return {"W": (h["out_channels"], h["in_channels"], kh, kw),
                "b": (h["out_channels"],)}
    if layer.kind == "batchnorm":
        n = (h["num_features"],)
        return {"mean": n, "var": n, "beta": n, "gamma": n}
    return {}


class ParameterStore:
    """Per-layer parameter tensors, immutable once constructed."""

    def __init__(self, entries: dict[int, dict[str, np.ndarray]]):
        frozen = {}
        for idx, params in entries.items():
            layer_params = {}
            for name, arr in params.items():
                a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
                a.flags.writeable = False
                layer_params[name] = a
            frozen[int(idx)] = layer_params
        self._entries = frozen

    def __getitem__(self, idx: int) -> dict[str, np.ndarray]:
        return self._entries[idx]

    def __contains__(self, idx: int) -> bool:
        return idx in self._entries

    def items(self):
        return sorted(self._entries.items())

    def replace(self, idx: int, name: str, arr: np.ndarray) -> "ParameterStore":
        """New store with one tensor swapped out."""
        entries = {i: dict(p) for i, p in self._entries.items()}
        entries[idx][name] = arr
        return ParameterStore(entries)

    def mutable_copy(self) -> dict[int, dict[str, np.ndarray]]:
        return {i: {n: a.copy() for n, a in p.items()} for i, p in self._entries.items()}


def validate_params(spec: ModelSpec, params: ParameterStore) -> None:
    """Check the store has exactly the tensors the spec requires."""
    expected = set(spec.parameterized_layers())
    present = {i for i, _ in params.items()}
    if expected != present:
        raise ShapeError(
            f"parameter entries {sorted(present)} do not match "
            f"parameterized layers {sorted(expected)}")
    for idx in expected:
        shapes = param_shapes(spec.layers[idx])
        entry = params[idx]
        if set(entry) != set(shapes):
            raise ShapeError(
                f"layer {idx} parameters {sorted(entry)} != expected {sorted(shapes)}")
        for name, shape in shapes.items():
            if entry[name].shape != shape:
                raise ShapeError(
                    f"layer {idx} parameter {name} has shape {entry[name].shape}, "
                    f"expected {shape}")


_forward_calls = 0


def forward_call_count() -> int:
    """Total forward_network invocations in this process (test instrumentation)."""
    return _forward_calls


def forward_network(spec: ModelSpec, params: ParameterStore, x: np.ndarray,
                    with_tape: bool = False, stop_before_softmax: bool = True):
    """Run the network on one sample; returns (output, tape or None).

    With ``stop_before_softmax`` the final softmax layer, if present, is
    skipped and the raw logits are returned.
    """
    global _forward_calls
    _forward_calls += 1

    x = ops.as_input(x)
    if x.shape != spec.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model {spec.input_shape}")

    tape = ops.GradTape() if with_tape else None
    if tape is not None:
        tape.watch(x)

    h = x
    skip = None
    last = len(spec.layers) - 1
    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "softmax" and stop_before_softmax and i == last:
            break
        if kind == "linear":
            p = params[i]
            h = ops.linear_forward(h, p["W"], p["b"], tape=tape)
        elif kind == "conv2d":
            p = params[i]
            h = ops.conv2d_forward(h, p["W"], p["b"], stride=layer.hyper["stride"],
                                   padding=layer.hyper["padding"], tape=tape)
        elif kind == "relu":
            h = ops.relu_forward(h, tape=tape)
        elif kind == "batchnorm":
            p = params[i]
            h = ops.batchnorm_inference_forward(
                h, p["mean"], p["var"], p["beta"], p["gamma"],
                eps=layer.hyper["eps"], tape=tape)
        elif kind == "maxpool":
            h = ops.maxpool2d_forward(h, layer.hyper["size"], layer.hyper["stride"], tape=tape)
        elif kind == "avgpool":
            h = ops.avgpool2d_forward(h, layer.hyper["size"], layer.hyper["stride"], tape=tape)
        elif kind == "flatten":
            h = ops.flatten_forward(h, tape=tape)
        elif kind == "residual-begin":
            skip = h
        elif kind == "residual-add":
            h = ops.residual_add(h, skip, tape=tape)
            skip = None
        elif kind == "softmax":
            h = ops.softmax(h, tape=tape)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite activation after layer {i} ({kind})")
    return h, tape


# ---------------------------------------------------------------------------
# serialization


def _manifest_dict(spec: ModelSpec) -> tuple[dict, list]:
    """Manifest JSON structure plus the flat (layer, name, shape) layout."""
    layout = []
    offset = 0
    layers_json = []
    for i, layer in enumerate(spec.layers):
        entry = {"kind": layer.kind, **layer.hyper}
        shapes = param_shapes(layer)
        if shapes:
            offsets = {}
            for name, shape in shapes.items():
                n = int(np.prod(shape))
                offsets[name] = {"offset": offset, "shape": list(shape)}
                layout.append((i, name, shape, offset))
                offset += n
            entry["param_offsets"] = offsets
        layers_json.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "layers": layers_json,
    }
    return manifest, layout


def save_model(spec: ModelSpec, params: ParameterStore, spec_path, weights_path,
               overwrite: bool = False) -> None:
    validate_params(spec, params)
    spec_path, weights_path = Path(spec_path), Path(weights_path)
    for path in (spec_path, weights_path):
        if path.exists() and not overwrite:
            raise FileExistsError(f"{path} exists; pass overwrite=True to replace it")

    manifest, layout = _manifest_dict(spec)
    chunks = []
    for idx, name, shape, _ in layout:
        arr = params[idx][name]
        chunks.append(arr.astype("<f4").tobytes())
    payload = b"".join(chunks)
    crc = zlib.crc32(payload) & 0xFFFFFFFF

    spec_path.write_text(json.dumps(manifest, indent=2) + "\n")
    weights_path.write_bytes(payload + struct.pack("<I", crc))


def _layer_from_json(entry: dict) -> LayerSpec:
    if "kind" not in entry:
        raise ModelFormatError("layer entry missing 'kind'")
    hyper = {k: v for k, v in entry.items() if k not in ("kind", "param_offsets")}
    return LayerSpec(entry["kind"], hyper)


def load_model(spec_path, weights_path) -> tuple[ModelSpec, ParameterStore]:
    spec_path, weights_path = Path(spec_path), Path(weights_path)
    try:
        manifest = json.loads(spec_path.read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError("manifest missing or unsupported format_version")
    for key in ("input_shape", "num_classes", "layers"):
        if key not in manifest:
            raise ModelFormatError(f"manifest missing '{key}'")

    layers = [_layer_from_json(e) for e in manifest["layers"]]
    spec = ModelSpec(manifest["input_shape"], layers, manifest["num_classes"])

    _, layout = _manifest_dict(spec)
    total = sum(int(np.prod(shape)) for _, _, shape, _ in layout)

    blob = weights_path.read_bytes()
    if len(blob) < 4:
        raise ModelFormatError("weight blob too short to hold a checksum")
    payload, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise ModelFormatError("weight blob checksum mismatch")
    if len(payload) != 4 * total:
        raise ModelFormatError(
            f"weight blob holds {len(payload) // 4} float32 values, "
            f"manifest expects {total}")

    # offsets recorded in the manifest must agree with the canonical layout
    for (idx, name, shape, offset), entry in zip(layout, _iter_offsets(manifest)):
        m_idx, m_name, m_off, m_shape = entry
        if (idx, name, offset, list(shape)) != (m_idx, m_name, m_off, m_shape):
            raise ModelFormatError(
                f"manifest offsets for layer {m_idx} parameter {m_name!r} "
                "do not match the canonical layout")

    entries: dict[int, dict[str, np.ndarray]] = {}
    for idx, name, shape, offset in layout:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=4 * offset)
        entries.setdefault(idx, {})[name] = arr.astype(np.float64).reshape(shape)
    params = ParameterStore(entries)
    validate_params(spec, params)
    return spec, params


def _iter_offsets(manifest: dict):
    for idx, entry in enumerate(manifest["layers"]):
        offsets = entry.get("param_offsets", {})
        kind = entry.get("kind")
        for name in PARAM_FIELDS.get(kind, ()):
            if name not in offsets:
                raise ModelFormatError(
                    f"manifest layer {idx} missing offsets for parameter {name!r}")
            rec = offsets[name]
            yield idx, name, rec.get("offset"), rec.get("shape")
