"""Layer-chain model representation with per-layer precision tags.

A model is an ordered list of layers: weight layers (linear, conv2d) carry
1-based indices and optional fused BN/ReLU; glue layers (scatter, maxpool,
upsample2x) are precision-free. The chain may end in several head layers
that all consume the same trunk tensor. Execution is precision-aware: INT8
layers fake-quantize their input activation and weight, FP16 layers round
both through binary16, FP32 layers run untouched.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .quant import (
    DType,
    PerChannelQuantParams,
    QuantParams,
    fake_quant,
    fake_quant_per_channel,
    fp16_roundtrip,
)
from .tensor_ops import ConvParams, PillarSample, conv2d, linear, max_over_points, relu, scatter_pillars, upsample2x

__all__ = [
    "BatchNorm",
    "LayerSpec",
    "ModelFormatError",
    "ModelGraph",
    "PrecisionPlan",
    "TapeEntry",
    "UnsupportedVersionError",
    "apply_plan",
    "dtype_boundaries",
    "fold_all_bn",
    "fold_bn",
    "forward",
    "graphs_equal",
    "load_model",
    "parse_plan_label",
    "save_model",
    "weights_digest",
]

WEIGHT_KINDS = ("linear", "conv2d")
GLUE_KINDS = ("scatter", "maxpool", "upsample2x")

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Malformed or inconsistent model file."""


class UnsupportedVersionError(ModelFormatError):
    """Model file written with an unknown format version."""


@dataclass(frozen=True)
class BatchNorm:
    """Per-output-channel batch norm statistics attached to a weight layer."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    index: int | None = None
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    bn: BatchNorm | None = None
    relu: bool = False
    conv: ConvParams | None = None
    grid: tuple[int, int] | None = None
    is_head: bool = False
    precision: DType = DType.FP32

    @property
    def is_weight_layer(self) -> bool:
        return self.kind in WEIGHT_KINDS


@dataclass(frozen=True)
class ModelGraph:
    """Ordered layer chain; list order is the topological order."""

    layers: tuple[LayerSpec, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        _validate_layers(self.layers)

    @property
    def weight_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.is_weight_layer)

    @property
    def num_indexed(self) -> int:
        return len(self.weight_layers)

    def layer_by_index(self, index: int) -> LayerSpec:
        for l in self.layers:
            if l.index == index:
                return l
        raise KeyError(f"no weight layer with index {index}")


def _validate_layers(layers: Sequence[LayerSpec]) -> None:
    expected = 1
    seen_head = False
    for l in layers:
        if l.kind not in WEIGHT_KINDS + GLUE_KINDS:
            raise ValueError(f"layer {l.name!r} has unknown kind {l.kind!r}")
        if l.is_weight_layer:
            if l.weight is None or l.bias is None:
                raise ValueError(f"weight layer {l.name!r} is missing weight or bias")
            if l.index != expected:
                raise ValueError(
                    f"weight layer {l.name!r} has index {l.index}, expected {expected} "
                    "(indices must be contiguous from 1 in chain order)"
                )
            expected += 1
            if l.kind == "conv2d" and l.conv is None:
                raise ValueError(f"conv layer {l.name!r} is missing conv params")
        else:
            if l.bn is not None:
                raise ValueError(f"non-weight layer {l.name!r} cannot carry batch norm")
            if l.index is not None:
                raise ValueError(f"glue layer {l.name!r} must not carry an index")
            if l.is_head:
                raise ValueError(f"glue layer {l.name!r} cannot be a head")
        if seen_head and not l.is_head:
            raise ValueError(f"layer {l.name!r} follows a head layer but is not a head")
        seen_head = seen_head or l.is_head


@dataclass(frozen=True)
class PrecisionPlan:
    """Default datatype plus per-layer-index overrides."""

    default: DType = DType.FP32
    overrides: dict[int, DType] = field(default_factory=dict)

    def resolve(self, index: int) -> DType:
        return self.overrides.get(index, self.default)

    def label(self) -> str:
        """Describe the plan using the FP16-override notation, e.g. 'FP16: 1,22'."""
        if not self.overrides:
            return self.default.value.upper()
        if self.default is DType.INT8 and all(d is DType.FP16 for d in self.overrides.values()):
            return "FP16: " + ",".join(str(i) for i in self.overrides)
        parts = ",".join(f"{i}={d.value}" for i, d in self.overrides.items())
        return f"{self.default.value.upper()} except {parts}"


def parse_plan_label(label: str) -> PrecisionPlan:
    """Parse 'FP32' / 'FP16' / 'INT8' / 'FP16: 1,22,3' into a plan."""
    text = label.strip()
    upper = text.upper()
    if upper in ("FP32", "FP16", "INT8"):
        return PrecisionPlan(default=DType(upper.lower()))
    if upper.startswith("FP16:"):
        indices = [int(tok) for tok in text.split(":", 1)[1].split(",") if tok.strip()]
        return PrecisionPlan(default=DType.INT8, overrides={i: DType.FP16 for i in indices})
    raise ValueError(f"unrecognized plan label {label!r}")


def apply_plan(graph: ModelGraph, plan: PrecisionPlan) -> ModelGraph:
    """Retag every indexed layer from the plan; weights are shared untouched."""
    known = {l.index for l in graph.weight_layers}
    unknown = sorted(set(plan.overrides) - known)
    if unknown:
        raise ValueError(f"plan overrides unknown layer indices {unknown}")
    layers = [
        dataclasses.replace(l, precision=plan.resolve(l.index)) if l.is_weight_layer else l
        for l in graph.layers
    ]
    return ModelGraph(layers=tuple(layers), meta=graph.meta)


def dtype_boundaries(precisions: Sequence[DType]) -> int:
    """Count dtype transitions between consecutive indexed layers."""
    return sum(1 for a, b in zip(precisions, precisions[1:]) if a is not b)


def graph_boundaries(graph: ModelGraph) -> int:
    return dtype_boundaries([l.precision for l in graph.weight_layers])


# ---------------------------------------------------------------------------
# BN folding


def fold_bn(layer: LayerSpec) -> LayerSpec:
    """Fold batch norm into the layer's weight and bias.

    weight' = weight * gamma / sqrt(var + eps) per output channel,
    bias'   = (bias - mean) * gamma / sqrt(var + eps) + beta.
    """
    if layer.bn is None:
        raise ValueError(f"layer {layer.name!r} has no batch norm to fold")
    bn = layer.bn
    denom_sq = bn.var.astype(np.float64) + bn.eps
    if np.any(denom_sq <= 0):
        raise ValueError(f"layer {layer.name!r} has non-positive var + eps")
    factor = (bn.gamma.astype(np.float64) / np.sqrt(denom_sq)).astype(np.float32)
    shape = (-1,) + (1,) * (layer.weight.ndim - 1)
    weight = (layer.weight * factor.reshape(shape)).astype(np.float32)
    bias = ((layer.bias - bn.mean) * factor + bn.beta).astype(np.float32)
    return dataclasses.replace(layer, weight=weight, bias=bias, bn=None)


def fold_all_bn(graph: ModelGraph) -> ModelGraph:
    layers = [fold_bn(l) if l.bn is not None else l for l in graph.layers]
    return ModelGraph(layers=tuple(layers), meta=graph.meta)


# ---------------------------------------------------------------------------
# Forward execution


@dataclass
class TapeEntry:
    """Per-layer forward record, enough to drive the training backward pass."""

    layer: LayerSpec
    x_in: np.ndarray | None = None      # input before any precision transform
    x_used: np.ndarray | None = None    # input actually fed to the kernel
    w_used: np.ndarray | None = None    # weight after precision transform
    pre_act: np.ndarray | None = None   # kernel output + bias, before ReLU
    act_qp: QuantParams | None = None
    weight_qp: QuantParams | PerChannelQuantParams | None = None
    argmax: np.ndarray | None = None    # maxpool winner indices
    sample: PillarSample | None = None


def _apply_bn(out: np.ndarray, bn: BatchNorm, kind: str) -> np.ndarray:
    factor = (bn.gamma / np.sqrt(bn.var + np.float32(bn.eps))).astype(np.float32)
    if kind == "conv2d":
        shape = (1, -1, 1, 1)
    else:
        shape = (1,) * (out.ndim - 1) + (-1,)
    return (out - bn.mean.reshape(shape)) * factor.reshape(shape) + bn.beta.reshape(shape)


def _layer_quant(layer: LayerSpec, stats):
    if stats is None or layer.index not in stats:
        raise RuntimeError(
            f"layer {layer.index} ({layer.name!r}) is tagged int8 but calibration "
            "stats supply no quant params for it"
        )
    entry = stats[layer.index]
    return entry.act_qp, entry.weight_qp


def _run_weight_layer(layer: LayerSpec, x: np.ndarray, stats, tape: list | None):
    act_qp = weight_qp = None
    if layer.precision is DType.INT8:
        act_qp, weight_qp = _layer_quant(layer, stats)
        x_used = fake_quant(x, act_qp)
        if isinstance(weight_qp, PerChannelQuantParams):
            w_used = fake_quant_per_channel(layer.weight, weight_qp)
        else:
            w_used = fake_quant(layer.weight, weight_qp)
    elif layer.precision is DType.FP16:
        x_used = fp16_roundtrip(x)
        w_used = fp16_roundtrip(layer.weight)
    else:
        x_used = x
        w_used = layer.weight
    if layer.kind == "linear":
        out = linear(x_used, w_used, layer.bias)
    else:
        out = conv2d(x_used, w_used, layer.bias, layer.conv)
    if layer.bn is not None:
        out = _apply_bn(out, layer.bn, layer.kind)
    pre_act = out
    if layer.relu:
        out = relu(out)
    if tape is not None:
        tape.append(
            TapeEntry(
                layer=layer,
                x_in=x,
                x_used=x_used,
                w_used=w_used,
                pre_act=pre_act,
                act_qp=act_qp,
                weight_qp=weight_qp,
            )
        )
    return out


def forward(
    graph: ModelGraph,
    x: np.ndarray | PillarSample,
    stats: Mapping | None = None,
    observe_fn: Callable[[LayerSpec, np.ndarray], None] | None = None,
    tape: list | None = None,
):
    """Run the chain on x; returns the final tensor, or a tuple per head.

    stats must cover every INT8-tagged layer (see calibration). observe_fn,
    when given, receives each indexed layer's input activation before any
    precision transform. tape, when a list, accumulates TapeEntry records.
    """
    sample = x if isinstance(x, PillarSample) else None
    current = sample.features if sample is not None else np.asarray(x, dtype=np.float32)

    head_outputs: list[np.ndarray] = []
    trunk: np.ndarray | None = None
    for layer in graph.layers:
        if layer.is_head:
            trunk = current if trunk is None else trunk
            source = trunk
        else:
            source = current
        if layer.is_weight_layer:
            if observe_fn is not None:
                observe_fn(layer, source)
            out = _run_weight_layer(layer, source, stats, tape)
        elif layer.kind == "maxpool":
            if sample is None:
                raise ValueError(f"maxpool layer {layer.name!r} needs a PillarSample input")
            masked = np.where(sample.point_mask[:, :, None], source, np.float32(-np.inf))
            winners = masked.argmax(axis=1) if tape is not None else None
            out = max_over_points(source, sample.point_mask)
            if tape is not None:
                tape.append(TapeEntry(layer=layer, x_in=source, argmax=winners, sample=sample))
        elif layer.kind == "scatter":
            if sample is None:
                raise ValueError(f"scatter layer {layer.name!r} needs a PillarSample input")
            if layer.grid is not None and tuple(layer.grid) != tuple(sample.grid):
                raise ValueError(
                    f"scatter grid {layer.grid} does not match sample grid {sample.grid}"
                )
            out = scatter_pillars(source, sample.coords, sample.grid)
            if tape is not None:
                tape.append(TapeEntry(layer=layer, x_in=source, sample=sample))
        else:  # upsample2x
            out = upsample2x(source)
            if tape is not None:
                tape.append(TapeEntry(layer=layer, x_in=source))
        if layer.is_head:
            head_outputs.append(out)
        else:
            current = out

    if head_outputs:
        return tuple(head_outputs)
    return current


# ---------------------------------------------------------------------------
# Serialization: <name>.mpq.json manifest + <name>.mpq.bin float32 blob


def _blob_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".mpq.json", ".mpq.bin", ".mpq"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    stem = p.with_name(name)
    return stem.with_name(stem.name + ".mpq.json"), stem.with_name(stem.name + ".mpq.bin")


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, arr: np.ndarray) -> dict:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        rec = {"shape": list(arr.shape), "offset": self.offset}
        self.chunks.append(data)
        self.offset += len(data)
        return rec


def _layer_manifest(layer: LayerSpec, blob: _BlobWriter) -> dict:
    rec = {
        "name": layer.name,
        "kind": layer.kind,
        "index": layer.index,
        "relu": layer.relu,
        "is_head": layer.is_head,
        "precision": layer.precision.value,
        "conv": None,
        "grid": list(layer.grid) if layer.grid is not None else None,
        "weight": blob.add(layer.weight) if layer.weight is not None else None,
        "bias": blob.add(layer.bias) if layer.bias is not None else None,
        "bn": None,
    }
    if layer.conv is not None:
        rec["conv"] = {"stride": list(layer.conv.stride), "padding": list(layer.conv.padding)}
    if layer.bn is not None:
        rec["bn"] = {
            "eps": layer.bn.eps,
            "gamma": blob.add(layer.bn.gamma),
            "beta": blob.add(layer.bn.beta),
            "mean": blob.add(layer.bn.mean),
            "var": blob.add(layer.bn.var),
        }
    return rec


def save_model(graph: ModelGraph, path) -> Path:
    """Write the graph as <path>.mpq.json + <path>.mpq.bin; returns the manifest path."""
    manifest_path, blob_path = _blob_paths(path)
    blob = _BlobWriter()
    layers = [_layer_manifest(l, blob) for l in graph.layers]
    data = b"".join(blob.chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": graph.meta,
        "blob_size": len(data),
        "checksum_sha256": hashlib.sha256(data).hexdigest(),
        "layers": layers,
    }
    blob_path.write_bytes(data)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def _read_array(rec: dict | None, data: bytes) -> np.ndarray | None:
    if rec is None:
        return None
    shape = tuple(rec["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = rec["offset"]
    end = start + 4 * count
    if end > len(data):
        raise ModelFormatError(
            f"weight blob truncated: need bytes [{start}, {end}) of {len(data)}"
        )
    return np.frombuffer(data[start:end], dtype="<f4").reshape(shape).astype(np.float32)


def load_model(path) -> ModelGraph:
    manifest_path, blob_path = _blob_paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed manifest {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"model format version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    if not blob_path.exists():
        raise ModelFormatError(f"manifest references missing weight blob {blob_path}")
    data = blob_path.read_bytes()
    if len(data) != manifest.get("blob_size"):
        raise ModelFormatError(
            f"weight blob size {len(data)} != manifest blob_size {manifest.get('blob_size')}"
        )
    digest = hashlib.sha256(data).hexdigest()
    if digest != manifest.get("checksum_sha256"):
        raise ModelFormatError("weight blob checksum mismatch")
    layers = []
    for rec in manifest["layers"]:
        bn = None
        if rec.get("bn") is not None:
            b = rec["bn"]
            bn = BatchNorm(
                gamma=_read_array(b["gamma"], data),
                beta=_read_array(b["beta"], data),
                mean=_read_array(b["mean"], data),
                var=_read_array(b["var"], data),
                eps=float(b["eps"]),
            )
        conv = None
        if rec.get("conv") is not None:
            conv = ConvParams(
                stride=tuple(rec["conv"]["stride"]), padding=tuple(rec["conv"]["padding"])
            )
        layers.append(
            LayerSpec(
                name=rec["name"],
                kind=rec["kind"],
                index=rec["index"],
                weight=_read_array(rec.get("weight"), data),
                bias=_read_array(rec.get("bias"), data),
                bn=bn,
                relu=bool(rec["relu"]),
                conv=conv,
                grid=tuple(rec["grid"]) if rec.get("grid") else None,
                is_head=bool(rec["is_head"]),
                precision=DType(rec["precision"]),
            )
        )
    return ModelGraph(layers=tuple(layers), meta=manifest.get("meta", {}))


def _arrays_equal(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is b
    return a.shape == b.shape and np.array_equal(a, b)


def graphs_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Bit-exact structural equality, weights included."""
    if len(a.layers) != len(b.layers) or a.meta != b.meta:
        return False
    for la, lb in zip(a.layers, b.layers):
        if (la.name, la.kind, la.index, la.relu, la.is_head, la.precision, la.conv, la.grid) != (
            lb.name,
            lb.kind,
            lb.index,
            lb.relu,
            lb.is_head,
            lb.precision,
            lb.conv,
            lb.grid,
        ):
            return False
        if not (_arrays_equal(la.weight, lb.weight) and _arrays_equal(la.bias, lb.bias)):
            return False
        if (la.bn is None) != (lb.bn is None):
            return False
        if la.bn is not None:
            if la.bn.eps != lb.bn.eps:
                return False
            for fa in ("gamma", "beta", "mean", "var"):
                if not _arrays_equal(getattr(la.bn, fa), getattr(lb.bn, fa)):
                    return False
    return True


def weights_digest(graph: ModelGraph) -> str:
    """sha256 over all parameter bytes, in layer order."""
    h = hashlib.sha256()
    for l in graph.layers:
        for arr in (l.weight, l.bias):
            if arr is not None:
                h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if l.bn is not None:
            for arr in (l.bn.gamma, l.bn.beta, l.bn.mean, l.bn.var):
                h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
