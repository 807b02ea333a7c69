"""Layer-sequence model description, profiling and the profile file format."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Iterable


class ValidationError(ValueError):
    """Invalid configuration or graph; ``field`` names the offending input."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ProfileError(ValueError):
    """Profile file could not be parsed or violates the schema."""


class LayerKind(str, Enum):
    ENCODER = "Encoder1D"
    POINTWISE = "PointwiseConv"
    DEPTHWISE = "DepthwiseConv"
    PRELU = "PReLU"
    MASK_CONV = "MaskConv"
    MASK_APPLY = "MaskApply"
    DECODER = "Decoder1D"


SEPARATION_KINDS = frozenset({LayerKind.POINTWISE, LayerKind.DEPTHWISE})


@dataclass(frozen=True)
class ConvParams:
    """Hyperparameters needed to execute a layer; absent on loaded profiles."""

    in_channels: int
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    groups: int = 1
    activation: str = "none"
    bias: bool = False
    sources: int = 1


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: LayerKind
    param_count: int
    mac_per_frame: int
    out_channels: int
    frame_a: Fraction = Fraction(1)
    frame_b: int = 0
    conv: ConvParams | None = None

    def frames_out(self, frames_in: int | Fraction) -> Fraction:
        return self.frame_a * frames_in + self.frame_b

    def mac_count(self, frames_in: int) -> int:
        """MACs for one pass, counted per output frame."""
        out = self.frames_out(frames_in)
        if out.denominator != 1:
            raise ValidationError(f"layers[{self.id}]", f"non-integer frame count {out}")
        return self.mac_per_frame * int(out)


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    skip_edges: tuple[tuple[int, int], ...]
    input_frames: int
    bytes_per_element: int = 4
    meta: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("layers", "graph has no layers")
        for i, layer in enumerate(self.layers):
            if layer.id != i:
                raise ValidationError(f"layers[{i}].id", f"expected {i}, got {layer.id}")
            if layer.param_count < 0 or layer.mac_per_frame < 0:
                raise ValidationError(f"layers[{i}]", "negative parameter or MAC count")
            if layer.out_channels < 1:
                raise ValidationError(f"layers[{i}].out_channels", "must be positive")
        n = len(self.layers)
        for p, c in self.skip_edges:
            if not (0 <= p < c < n):
                raise ValidationError("skip_edges", f"edge ({p}, {c}) is not forward within {n} layers")
        if self.input_frames < 1:
            raise ValidationError("input_frames", "must be positive")
        if self.bytes_per_element < 1:
            raise ValidationError("bytes_per_element", "must be positive")
        self.frames_after()

    def __len__(self) -> int:
        return len(self.layers)

    def frames_after(self) -> list[int]:
        """Frame count after each layer, computed stepwise."""
        frames: list[int] = []
        f: Fraction = Fraction(self.input_frames)
        for layer in self.layers:
            f = layer.frames_out(f)
            if f.denominator != 1 or f < 1:
                raise ValidationError(f"layers[{layer.id}]", f"frame transform yields {f} frames")
            frames.append(int(f))
        return frames

    def composed_transform(self, upto: int | None = None) -> tuple[Fraction, Fraction]:
        """Affine (a, b) of the composition of layers[0..upto]."""
        a, b = Fraction(1), Fraction(0)
        for layer in self.layers[: None if upto is None else upto + 1]:
            a, b = layer.frame_a * a, layer.frame_a * b + layer.frame_b
        return a, b

    @property
    def total_params(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def index_of(self, kind: LayerKind) -> list[int]:
        return [layer.id for layer in self.layers if layer.kind == kind]


@dataclass(frozen=True)
class VolumeProfile:
    """Per-boundary data volumes and parameter distribution of a graph.

    ``boundary_volumes[i]`` is the byte count leaving layer ``i`` towards layer
    ``i + 1``.  ``input_volume`` is the model input at ``bytes_per_element``;
    client-side raw payloads are sized separately by the simulator.
    """

    kinds: tuple[LayerKind, ...]
    param_counts: tuple[int, ...]
    mac_counts: tuple[int, ...]
    frames: tuple[int, ...]
    layer_volumes: tuple[int, ...]
    skip_volumes: dict[tuple[int, int], int]
    param_prefix: tuple[int, ...]
    input_frames: int
    input_volume: int

    @property
    def boundary_volumes(self) -> tuple[int, ...]:
        return self.layer_volumes[:-1]

    @property
    def output_volume(self) -> int:
        return self.layer_volumes[-1]

    @property
    def skip_edges(self) -> tuple[tuple[int, int], ...]:
        return tuple(self.skip_volumes)

    @property
    def n_layers(self) -> int:
        return len(self.kinds)

    @property
    def total_params(self) -> int:
        return self.param_prefix[-1]

    @property
    def total_macs(self) -> int:
        return sum(self.mac_counts)

    def block_params(self, first: int, last: int) -> int:
        return self.param_prefix[last] - (self.param_prefix[first - 1] if first else 0)

    def median_boundary_volume(self) -> float:
        vols = self.boundary_volumes
        return float(statistics.median(vols)) if vols else float(self.output_volume)

    def last_separation_layer(self) -> int | None:
        ids = [i for i, k in enumerate(self.kinds) if k in SEPARATION_KINDS]
        return ids[-1] if ids else None

    def share_of(self, kinds: Iterable[LayerKind]) -> float:
        wanted = set(kinds)
        mass = sum(p for p, k in zip(self.param_counts, self.kinds) if k in wanted)
        return mass / self.total_params


def profile(graph: ModelGraph) -> VolumeProfile:
    frames = graph.frames_after()
    bpe = graph.bytes_per_element
    layer_volumes = tuple(layer.out_channels * f * bpe for layer, f in zip(graph.layers, frames))
    frames_in = [graph.input_frames, *frames[:-1]]
    prefix: list[int] = []
    running = 0
    for layer in graph.layers:
        running += layer.param_count
        prefix.append(running)
    return VolumeProfile(
        kinds=tuple(layer.kind for layer in graph.layers),
        param_counts=tuple(layer.param_count for layer in graph.layers),
        mac_counts=tuple(layer.mac_count(f) for layer, f in zip(graph.layers, frames_in)),
        frames=tuple(frames),
        layer_volumes=layer_volumes,
        skip_volumes={edge: layer_volumes[edge[0]] for edge in graph.skip_edges},
        param_prefix=tuple(prefix),
        input_frames=graph.input_frames,
        input_volume=graph.input_frames * bpe,
    )


# --------------------------------------------------------------------------
# Builders


def _conv(
    lid: int,
    kind: LayerKind,
    cin: int,
    cout: int,
    kernel: int = 1,
    *,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    groups: int = 1,
    activation: str = "none",
    bias: bool = False,
) -> LayerSpec:
    weights = cout * (cin // groups) * kernel
    span = (kernel - 1) * dilation + 1
    # frames_out = (f + 2p - span) / s + 1
    return LayerSpec(
        id=lid,
        kind=kind,
        param_count=weights + (cout if bias else 0),
        mac_per_frame=weights,
        out_channels=cout,
        frame_a=Fraction(1, stride),
        frame_b=Fraction(2 * padding - span, stride) + 1,
        conv=ConvParams(
            in_channels=cin,
            kernel=kernel,
            stride=stride,
            dilation=dilation,
            padding=padding,
            groups=groups,
            activation=activation,
            bias=bias,
        ),
    )


def _mask_apply(lid: int, sources: int, channels: int) -> LayerSpec:
    return LayerSpec(
        id=lid,
        kind=LayerKind.MASK_APPLY,
        param_count=0,
        mac_per_frame=sources * channels,
        out_channels=sources * channels,
        conv=ConvParams(in_channels=sources * channels, sources=sources),
    )


def _decoder(lid: int, sources: int, channels: int, kernel: int, bias: bool) -> LayerSpec:
    stride = kernel // 2
    weights = channels * kernel
    return LayerSpec(
        id=lid,
        kind=LayerKind.DECODER,
        param_count=weights + (1 if bias else 0),
        # Overlap-add MACs per output sample, all sources.
        mac_per_frame=sources * weights // stride,
        out_channels=sources,
        frame_a=Fraction(stride),
        frame_b=kernel - stride,
        conv=ConvParams(in_channels=channels, kernel=kernel, stride=stride, bias=bias, sources=sources),
    )


def _fix_frame_b(layer: LayerSpec) -> LayerSpec:
    b = Fraction(layer.frame_b)
    if b.denominator != 1:
        return layer
    return LayerSpec(**{**layer.__dict__, "frame_b": int(b)})


@dataclass(frozen=True)
class ToyConfig:
    """Small Conv-TasNet-shaped model; ``sep_channels`` defaults to ``enc_filters``."""

    sources: int = 2
    enc_filters: int = 4
    kernel: int = 4
    sep_channels: int | None = None
    sep_layers: int = 8
    frames: int = 64
    bias: bool = False
    activations: bool = True

    @property
    def B(self) -> int:
        return self.enc_filters if self.sep_channels is None else self.sep_channels

    def validate(self) -> None:
        if self.sources < 1:
            raise ValidationError("sources", "need at least one source")
        if self.enc_filters < 1:
            raise ValidationError("enc_filters", "must be >= 1")
        if self.kernel < 2 or self.kernel % 2:
            raise ValidationError("kernel", "must be even and >= 2")
        if self.B < 1:
            raise ValidationError("sep_channels", "must be >= 1")
        if self.sep_layers < 1:
            raise ValidationError("sep_layers", "must be >= 1")
        if self.frames < self.kernel:
            raise ValidationError("frames", f"must be >= kernel ({self.kernel})")
        if (self.frames - self.kernel) % (self.kernel // 2):
            raise ValidationError("frames", f"frames - kernel must be a multiple of the stride {self.kernel // 2}")

    @classmethod
    def parse(cls, text: str) -> "ToyConfig":
        """Parse ``C=2,N=4,L=4,B=4,S=8,T=64`` (any subset)."""
        names = {"C": "sources", "N": "enc_filters", "L": "kernel", "B": "sep_channels", "S": "sep_layers", "T": "frames"}
        kwargs: dict[str, Any] = {}
        for item in filter(None, (s.strip() for s in text.split(","))):
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in names:
                raise ValidationError(key or item, "expected one of C,N,L,B,S,T as KEY=VALUE")
            try:
                kwargs[names[key]] = int(value)
            except ValueError:
                raise ValidationError(key, f"not an integer: {value!r}") from None
        return cls(**kwargs)


def build_toy_convtasnet(config: ToyConfig) -> ModelGraph:
    config.validate()
    C, N, L, B, S = config.sources, config.enc_filters, config.kernel, config.B, config.sep_layers
    act = "prelu" if config.activations else "none"
    relu = "relu" if config.activations else "none"
    layers = [_conv(0, LayerKind.ENCODER, 1, N, L, stride=L // 2, activation=relu, bias=config.bias)]
    cin = N
    for j in range(S):
        lid = len(layers)
        if j % 2 == 0:
            layers.append(_conv(lid, LayerKind.POINTWISE, cin, B, activation=act, bias=config.bias))
        else:
            d = 2 ** ((j // 2) % 4)
            layers.append(
                _conv(lid, LayerKind.DEPTHWISE, B, B, 3, dilation=d, padding=d, groups=B, activation=act, bias=config.bias)
            )
        cin = B
    layers.append(_conv(len(layers), LayerKind.MASK_CONV, B, C * N, activation=relu, bias=config.bias))
    mask_apply = len(layers)
    layers.append(_mask_apply(mask_apply, C, N))
    layers.append(_decoder(len(layers), C, N, L, config.bias))
    return ModelGraph(
        layers=tuple(_fix_frame_b(layer) for layer in layers),
        skip_edges=((0, mask_apply),),
        input_frames=config.frames,
        bytes_per_element=4,
        meta={"sources": C},
    )


# Reconstructed full-scale profile.  Hyperparameters chosen so the totals
# round to the target figures: 0.663M parameters, 98.764% in separation.
REFERENCE_NAME = "convtasnet_0663M"
REFERENCE_HPARAMS = {
    "sources": 2,
    "enc_filters": 64,
    "kernel": 32,
    "bottleneck": 32,
    "hidden": 1217,
    "conv_blocks": 8,
    "depthwise_kernel": 3,
    "samples": 32000,
}
REFERENCE_META = {
    "name": REFERENCE_NAME,
    "reconstruction": True,
    "expected_total_params": 663000,
    "expected_separation_share_pct": 98.764,
    "expected_initial_block_share_pct": 12.649,
    "initial_blocks": 8,
    "hyperparameters": REFERENCE_HPARAMS,
}


def build_reference_convtasnet() -> ModelGraph:
    """Full-scale Conv-TasNet reconstruction (no weights needed for planning).

    Encoder 1->N (kernel L, stride L/2), a 1x1 bottleneck N->B, ``conv_blocks``
    units of [1x1 B->H, depthwise H, 1x1 H->B], mask 1x1 B->C*N, mask
    application and an overlap-add decoder.
    """
    hp = REFERENCE_HPARAMS
    C, N, L, B, H = hp["sources"], hp["enc_filters"], hp["kernel"], hp["bottleneck"], hp["hidden"]
    P = hp["depthwise_kernel"]
    layers = [_conv(0, LayerKind.ENCODER, 1, N, L, stride=L // 2, activation="relu")]
    layers.append(_conv(1, LayerKind.POINTWISE, N, B))
    for x in range(hp["conv_blocks"]):
        d = 2**x
        layers.append(_conv(len(layers), LayerKind.POINTWISE, B, H, activation="prelu"))
        layers.append(
            _conv(len(layers), LayerKind.DEPTHWISE, H, H, P, dilation=d, padding=d * (P - 1) // 2, groups=H, activation="prelu")
        )
        layers.append(_conv(len(layers), LayerKind.POINTWISE, H, B))
    layers.append(_conv(len(layers), LayerKind.MASK_CONV, B, C * N, activation="relu"))
    mask_apply = len(layers)
    layers.append(_mask_apply(mask_apply, C, N))
    layers.append(_decoder(len(layers), C, N, L, False))
    return ModelGraph(
        layers=tuple(_fix_frame_b(layer) for layer in layers),
        skip_edges=((0, mask_apply),),
        input_frames=hp["samples"],
        bytes_per_element=4,
        meta=dict(REFERENCE_META),
    )


# --------------------------------------------------------------------------
# Profile file I/O

LAYER_FIELDS = ("id", "kind", "param_count", "mac_per_frame", "out_channels", "frame_a", "frame_b")
TOP_FIELDS = ("layers", "skip_edges", "input_frames", "bytes_per_element")
OPTIONAL_TOP_FIELDS = ("meta",)


def _fraction_to_json(value: Fraction) -> int | str:
    return int(value) if value.denominator == 1 else f"{value.numerator}/{value.denominator}"


def graph_to_dict(graph: ModelGraph) -> dict[str, Any]:
    out: dict[str, Any] = {
        "layers": [
            {
                "id": layer.id,
                "kind": layer.kind.value,
                "param_count": layer.param_count,
                "mac_per_frame": layer.mac_per_frame,
                "out_channels": layer.out_channels,
                "frame_a": _fraction_to_json(layer.frame_a),
                "frame_b": _fraction_to_json(Fraction(layer.frame_b)),
            }
            for layer in graph.layers
        ],
        "skip_edges": [list(edge) for edge in graph.skip_edges],
        "input_frames": graph.input_frames,
        "bytes_per_element": graph.bytes_per_element,
    }
    if graph.meta:
        out["meta"] = graph.meta
    return out


def dumps_profile(graph: ModelGraph) -> str:
    return json.dumps(graph_to_dict(graph), indent=2) + "\n"


def save_profile(graph: ModelGraph, path: str | Path) -> None:
    Path(path).write_text(dumps_profile(graph))


def _int_field(obj: dict, key: str, where: str, minimum: int = 0) -> int:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ProfileError(f"{where}.{key}: expected integer, got {value!r}")
    if value < minimum:
        raise ProfileError(f"{where}.{key}: must be >= {minimum}, got {value}")
    return value


def _fraction_field(obj: dict, key: str, where: str) -> Fraction:
    value = obj[key]
    try:
        if isinstance(value, bool):
            raise TypeError
        if isinstance(value, (int, str)):
            return Fraction(value)
    except (TypeError, ValueError, ZeroDivisionError):
        pass
    raise ProfileError(f"{where}.{key}: expected integer or 'p/q' string, got {value!r}")


def _check_keys(obj: Any, required: tuple[str, ...], optional: tuple[str, ...], where: str) -> None:
    if not isinstance(obj, dict):
        raise ProfileError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(required) - set(optional))
    if unknown:
        raise ProfileError(f"{where}: unknown field(s) {', '.join(unknown)}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ProfileError(f"{where}: missing field(s) {', '.join(missing)}")


def graph_from_dict(data: Any) -> ModelGraph:
    _check_keys(data, TOP_FIELDS, OPTIONAL_TOP_FIELDS, "profile")
    if not isinstance(data["layers"], list) or not data["layers"]:
        raise ProfileError("profile.layers: must be a non-empty array")
    layers = []
    for i, raw in enumerate(data["layers"]):
        where = f"layers[{i}]"
        _check_keys(raw, LAYER_FIELDS, (), where)
        try:
            kind = LayerKind(raw["kind"])
        except ValueError:
            raise ProfileError(f"{where}.kind: unknown layer kind {raw['kind']!r}") from None
        frame_b = _fraction_field(raw, "frame_b", where)
        if frame_b.denominator != 1:
            raise ProfileError(f"{where}.frame_b: must be an integer")
        layers.append(
            LayerSpec(
                id=_int_field(raw, "id", where),
                kind=kind,
                param_count=_int_field(raw, "param_count", where),
                mac_per_frame=_int_field(raw, "mac_per_frame", where),
                out_channels=_int_field(raw, "out_channels", where, 1),
                frame_a=_fraction_field(raw, "frame_a", where),
                frame_b=int(frame_b),
            )
        )
    edges = data["skip_edges"]
    if not isinstance(edges, list) or not all(
        isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e) for e in edges
    ):
        raise ProfileError("profile.skip_edges: expected an array of [producer, consumer] pairs")
    meta = data.get("meta", {})
    if not isinstance(meta, dict):
        raise ProfileError("profile.meta: expected an object")
    try:
        return ModelGraph(
            layers=tuple(layers),
            skip_edges=tuple((p, c) for p, c in edges),
            input_frames=_int_field(data, "input_frames", "profile", 1),
            bytes_per_element=_int_field(data, "bytes_per_element", "profile", 1),
            meta=meta,
        )
    except ValidationError as exc:
        raise ProfileError(str(exc)) from None


def loads_profile(text: str) -> ModelGraph:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return graph_from_dict(data)


def load_profile(path: str | Path) -> ModelGraph:
    """Load a profile file; the result carries no executable hyperparameters."""
    return loads_profile(Path(path).read_text())


def load_fixture(name: str = REFERENCE_NAME) -> ModelGraph:
    """Bundled profile by name (``convtasnet`` is an alias of the reference)."""
    if name == "convtasnet":
        name = REFERENCE_NAME
    try:
        text = resources.files("nnsplit").joinpath("data", f"{name}.json").read_text()
    except FileNotFoundError:
        raise ProfileError(f"no bundled fixture named {name!r}") from None
    return loads_profile(text)


def resolve_profile(ref: str, base: Path | None = None) -> ModelGraph:
    """``fixture:<name>`` or a filesystem path (relative to ``base``)."""
    if ref.startswith("fixture:"):
        return load_fixture(ref.split(":", 1)[1])
    path = Path(ref)
    if base is not None and not path.is_absolute():
        path = base / path
    return load_profile(path)
