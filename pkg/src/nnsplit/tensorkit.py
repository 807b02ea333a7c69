"""Small double-precision engine running the toy model whole or block by block.

Tensors are plain ``numpy`` arrays of shape ``(channels, frames)``, float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .modelgraph import LayerKind, LayerSpec, ModelGraph, ValidationError
from .rng import SplitMix64

if TYPE_CHECKING:
    from .planner import SplitPlan

PRELU_SLOPE = 0.25
SDR_CAP_DB = 200.0


class ShapeError(ValueError):
    pass


class SizingError(ShapeError):
    def __init__(self, required: int, got: int):
        super().__init__(f"input has {got} frames, kernel span needs at least {required}")
        self.required = required


class LayerError(RuntimeError):
    def __init__(self, layer_id: int, cause: Exception):
        super().__init__(f"layer {layer_id}: {cause}")
        self.layer_id = layer_id


class MetricError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ShapeError(f"expected (channels, frames), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("tensor holds non-finite values")
    return arr


def _activate(y: np.ndarray, activation: str) -> np.ndarray:
    if activation == "none":
        return y
    if activation == "relu":
        return np.maximum(y, 0.0)
    if activation == "prelu":
        return np.where(y >= 0.0, y, PRELU_SLOPE * y)
    raise ValueError(f"unknown activation {activation!r}")


def conv1d(
    x,
    weights,
    kernel: int,
    stride: int = 1,
    dilation: int = 1,
    activation: str = "none",
    *,
    padding: int = 0,
    groups: int = 1,
    bias=None,
) -> np.ndarray:
    """Cross-correlation; ``weights`` has shape ``(out, in // groups, kernel)``.

    Accumulation runs over kernel taps in ascending order, each tap a
    channel-major matrix product, so results depend only on the inputs.
    """
    x = as_tensor(x)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, x.shape[0] // groups, kernel)
    cout = w.shape[0]
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding)))
    span = (kernel - 1) * dilation + 1
    frames = x.shape[1]
    if frames < span:
        raise SizingError(span - 2 * padding, frames - 2 * padding)
    n_out = (frames - span) // stride + 1
    cin_g, cout_g = x.shape[0] // groups, cout // groups
    out = np.zeros((cout, n_out))
    for g in range(groups):
        xs = x[g * cin_g : (g + 1) * cin_g]
        wg = w[g * cout_g : (g + 1) * cout_g]
        acc = out[g * cout_g : (g + 1) * cout_g]
        for j in range(kernel):
            start = j * dilation
            window = xs[:, start : start + (n_out - 1) * stride + 1 : stride]
            acc += wg[:, :, j] @ window
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(-1, 1)
    return _activate(out, activation)


def transposed_conv1d(x, weights, kernel: int, stride: int, *, bias=None) -> np.ndarray:
    """Overlap-add; ``weights`` has shape ``(in, out, kernel)``."""
    x = as_tensor(x)
    cin, frames = x.shape
    if frames < 1:
        raise ShapeError("transposed convolution needs at least one frame")
    w = np.asarray(weights, dtype=np.float64).reshape(cin, -1, kernel)
    out = np.zeros((w.shape[1], (frames - 1) * stride + kernel))
    for j in range(kernel):
        # frame t contributes w[:, :, j] . x[:, t] to output sample t*stride + j
        out[:, j : j + (frames - 1) * stride + 1 : stride] += w[:, :, j].T @ x
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(-1, 1)
    return out


def mask_apply(E, M, sources: int) -> list[np.ndarray]:
    E, M = as_tensor(E), as_tensor(M)
    if M.shape[0] != sources * E.shape[0] or M.shape[1] != E.shape[1]:
        raise ShapeError(f"mask shape {M.shape} does not match {sources} x encoder shape {E.shape}")
    n = E.shape[0]
    return [E * M[c * n : (c + 1) * n] for c in range(sources)]


def sdr(reference, estimate) -> float:
    """Signal-to-distortion ratio in dB, capped at ``SDR_CAP_DB``."""
    s = np.asarray(reference, dtype=np.float64).ravel()
    e = np.asarray(estimate, dtype=np.float64).ravel()
    if s.shape != e.shape:
        raise ShapeError(f"length mismatch: {s.size} vs {e.size}")
    signal = float(np.dot(s, s))
    if signal == 0.0:
        raise MetricError("SDR undefined for an all-zero reference")
    err = s - e
    distortion = float(np.dot(err, err))
    if distortion == 0.0:
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10.0 * math.log10(signal / distortion))


# --------------------------------------------------------------------------
# Weights


@dataclass
class WeightSet:
    rng_seed: int
    weights: dict[int, np.ndarray] = field(default_factory=dict)
    biases: dict[int, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "WeightSet":
        return WeightSet(
            self.rng_seed,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.biases.items()},
        )


def weight_shape(layer: LayerSpec) -> tuple[int, ...] | None:
    cp = layer.conv
    if cp is None:
        raise ValidationError(f"layers[{layer.id}]", "profile-only layer cannot be executed")
    if layer.kind == LayerKind.MASK_APPLY:
        return None
    if layer.kind == LayerKind.DECODER:
        return (cp.in_channels, 1, cp.kernel)
    return (layer.out_channels, cp.in_channels // cp.groups, cp.kernel)


def generate_weights(graph: ModelGraph, seed: int = 42) -> WeightSet:
    rng = SplitMix64(seed)
    ws = WeightSet(seed)
    for layer in graph.layers:
        shape = weight_shape(layer)
        if shape is None:
            continue
        ws.weights[layer.id] = rng.weights(shape)
        if layer.conv.bias:
            ws.biases[layer.id] = rng.weights((shape[1] if layer.kind == LayerKind.DECODER else shape[0],))
    return ws


def dump_weights(ws: WeightSet, path: str | Path) -> None:
    """Header ``b'NNSW' u32 version u64 seed u32 count``, then per layer
    ``u32 id u32 n_weights u32 n_bias`` followed by the float64 values."""
    with open(path, "wb") as fh:
        fh.write(b"NNSW" + struct.pack("<IQI", 1, ws.rng_seed & (2**64 - 1), len(ws.weights)))
        for lid in sorted(ws.weights):
            w = ws.weights[lid].astype("<f8").ravel()
            b = ws.biases.get(lid, np.zeros(0)).astype("<f8").ravel()
            fh.write(struct.pack("<III", lid, w.size, b.size))
            fh.write(w.tobytes())
            fh.write(b.tobytes())


def load_weights(path: str | Path, graph: ModelGraph) -> WeightSet:
    data = Path(path).read_bytes()
    if data[:4] != b"NNSW":
        raise ValueError("not a weight dump")
    version, seed, count = struct.unpack_from("<IQI", data, 4)
    if version != 1:
        raise ValueError(f"unsupported weight dump version {version}")
    pos = 4 + struct.calcsize("<IQI")
    ws = WeightSet(seed)
    for _ in range(count):
        lid, nw, nb = struct.unpack_from("<III", data, pos)
        pos += 12
        w = np.frombuffer(data, "<f8", nw, pos).astype(np.float64)
        pos += 8 * nw
        ws.weights[lid] = w.reshape(weight_shape(graph.layers[lid]))
        if nb:
            ws.biases[lid] = np.frombuffer(data, "<f8", nb, pos).astype(np.float64)
        pos += 8 * nb
    return ws


# --------------------------------------------------------------------------
# Execution


def run_layer(layer: LayerSpec, weights: WeightSet, x: np.ndarray, skips: dict[int, np.ndarray]) -> np.ndarray:
    cp = layer.conv
    w = weights.weights.get(layer.id)
    b = weights.biases.get(layer.id)
    try:
        if cp is None:
            raise ValidationError(f"layers[{layer.id}]", "profile-only layer cannot be executed")
        expected = weight_shape(layer)
        if expected is not None and (w is None or w.shape != expected):
            raise ShapeError(f"weights {None if w is None else w.shape}, expected {expected}")
        if layer.kind == LayerKind.MASK_APPLY:
            (E,) = skips.values()
            return np.concatenate(mask_apply(E, x, cp.sources))
        if layer.kind == LayerKind.DECODER:
            n = cp.in_channels
            return np.concatenate(
                [transposed_conv1d(x[c * n : (c + 1) * n], w, cp.kernel, cp.stride, bias=b) for c in range(cp.sources)]
            )
        return conv1d(
            x,
            w,
            cp.kernel,
            cp.stride,
            cp.dilation,
            cp.activation,
            padding=cp.padding,
            groups=cp.groups,
            bias=b,
        )
    except (ShapeError, ValueError) as exc:
        raise LayerError(layer.id, exc) from exc


def _check_input(graph: ModelGraph, x) -> np.ndarray:
    x = as_tensor(x)
    if x.shape != (1, graph.input_frames):
        raise ShapeError(f"input must be (1, {graph.input_frames}), got {x.shape}")
    return x


def _split_sources(y: np.ndarray) -> list[np.ndarray]:
    return [y[c : c + 1] for c in range(y.shape[0])]


def run_layers(
    graph: ModelGraph,
    weights: WeightSet,
    first: int,
    last: int,
    x: np.ndarray,
    skip_in: dict[tuple[int, int], np.ndarray],
) -> tuple[np.ndarray, dict[tuple[int, int], np.ndarray]]:
    """Execute layers ``first..last``; returns the block output and the skip
    tensors it produced for consumers outside the range."""
    produced: dict[tuple[int, int], np.ndarray] = {}
    available = dict(skip_in)
    for layer in graph.layers[first : last + 1]:
        needed = {e[0]: available[e] for e in graph.skip_edges if e[1] == layer.id}
        x = run_layer(layer, weights, x, needed)
        for edge in graph.skip_edges:
            if edge[0] == layer.id:
                available[edge] = x
                if edge[1] > last:
                    produced[edge] = x
    return x, produced


def forward_monolithic(graph: ModelGraph, weights: WeightSet, x) -> list[np.ndarray]:
    x = _check_input(graph, x)
    y, _ = run_layers(graph, weights, 0, len(graph) - 1, x, {})
    return _split_sources(y)


def _wire(arr: np.ndarray) -> np.ndarray:
    """Round-trip through the byte representation a link would carry."""
    return np.frombuffer(arr.astype("<f8").tobytes(), "<f8").reshape(arr.shape).astype(np.float64)


def forward_blocks(
    graph: ModelGraph, weights: WeightSet, plan: "SplitPlan", x
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Run a plan block by block; returns (final outputs, per-block outputs)."""
    plan.validate_for(graph)
    x = _check_input(graph, x)
    in_flight: dict[tuple[int, int], np.ndarray] = {}
    block_outputs = []
    for block in plan.blocks:
        addressed = {e: in_flight.pop(e) for e in list(in_flight) if block.first <= e[1] <= block.last}
        x, produced = run_layers(graph, weights, block.first, block.last, x, addressed)
        for edge, tensor in produced.items():
            in_flight[edge] = _wire(tensor)
        x = _wire(x)
        block_outputs.append(x)
    return _split_sources(x), block_outputs


def forward_split(graph: ModelGraph, weights: WeightSet, plan: "SplitPlan", x) -> list[np.ndarray]:
    return forward_blocks(graph, weights, plan, x)[0]


@dataclass
class VerifyReport:
    passed: bool
    max_deviation: float
    tolerance: float
    per_block_deviation: list[float]
    offending_block: int | None
    sdr_monolithic: list[float]
    sdr_split: list[float]


def verify_split(
    graph: ModelGraph,
    weights: WeightSet,
    plan: "SplitPlan",
    x,
    references: Sequence[np.ndarray] | None = None,
    *,
    split_weights: WeightSet | None = None,
    tolerance: float = 1e-9,
) -> VerifyReport:
    """Compare split against monolithic execution, block by block.

    ``split_weights`` lets the split side run with different weights (fault
    injection); the first block whose output deviates is reported.
    """
    x = _check_input(graph, x)
    mono = forward_monolithic(graph, weights, x)
    split, block_outs = forward_blocks(graph, split_weights or weights, plan, x)
    # Monolithic intermediate outputs at each block's last layer.
    per_block = []
    y = x
    available: dict[tuple[int, int], np.ndarray] = {}
    for block, got in zip(plan.blocks, block_outs):
        for layer in graph.layers[block.first : block.last + 1]:
            needed = {e[0]: available[e] for e in graph.skip_edges if e[1] == layer.id}
            y = run_layer(layer, weights, y, needed)
            for edge in graph.skip_edges:
                if edge[0] == layer.id:
                    available[edge] = y
        per_block.append(float(np.max(np.abs(got - y))) if got.size else 0.0)
    max_dev = max(float(np.max(np.abs(a - b))) for a, b in zip(mono, split))
    offending = next((b.id for b, d in zip(plan.blocks, per_block) if d > tolerance), None)
    refs = list(references) if references is not None else None
    sdr_m = [sdr(r, e) for r, e in zip(refs, mono)] if refs else []
    sdr_s = [sdr(r, e) for r, e in zip(refs, split)] if refs else []
    passed = max_dev <= tolerance and offending is None and sdr_m == sdr_s
    return VerifyReport(passed, max_dev, tolerance, per_block, offending, sdr_m, sdr_s)


def toy_sources(graph: ModelGraph, sources: int, seed: int = 42) -> tuple[np.ndarray, list[np.ndarray]]:
    """Deterministic bounded test signals and their mixture (|x| <= 1)."""
    rng = SplitMix64(seed ^ 0x5EED)
    t = np.arange(graph.input_frames)
    refs = []
    for c in range(sources):
        phase = 2 * np.pi * rng.uniform(1)[0]
        freq = 0.02 + 0.05 * c + 0.01 * rng.uniform(1)[0]
        refs.append((0.5 / sources) * np.sin(2 * np.pi * freq * t + phase)[np.newaxis, :] + (0.4 / sources) * (rng.uniform(t.size)[np.newaxis, :] - 0.5))
    mix = np.sum(refs, axis=0)
    return mix, refs
