"""Small tapped networks for teacher/student pairs, plus checkpoint IO.

A TappedNetwork is a flat layer list with named parameter tensors and a
map from tap names to layer indices; forward_tapped returns the logits
together with the intermediate feature maps at every tap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor_engine as te
from .tensor_engine import Tensor

CHECKPOINT_MAGIC = b"DAGG"
CHECKPOINT_VERSION = 1

# per-stage output channels of the convnet at width multiplier 1
CONV_STAGE_CHANNELS = (8, 16, 32)


class BadShape(ValueError):
    """Input shape violates a builder precondition."""


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or inconsistent with the network."""


@dataclass
class LayerSpec:
    """One layer: kind in {conv, relu, avgpool2, flatten, linear} plus sizes."""

    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    in_dim: int = 0
    out_dim: int = 0


@dataclass
class FeatureBundle:
    """Forward products: tap name -> feature tensor, plus the logits."""

    taps: dict[str, Tensor]
    logits: Tensor


@dataclass
class TappedNetwork:
    """Sequential layers with named parameters and named feature taps."""

    layer_specs: list[LayerSpec]
    params: dict[str, Tensor]
    taps: dict[str, int]
    input_shape: tuple
    logits_dim: int
    frozen: bool = False
    param_layers: dict[int, str] = field(default_factory=dict)  # layer idx -> param prefix

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def freeze(self):
        """Drop gradient tracking on every parameter; frozen nets stay constant."""
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
            p._tape = None

    def tap_shapes(self, batch: int = 1) -> dict[str, tuple]:
        """Tap name -> feature shape for a given batch size (dry forward)."""
        with te.no_grad():
            zeros = Tensor(np.zeros((batch,) + tuple(self.input_shape)))
            bundle = forward_tapped(self, zeros)
        return {name: t.data.shape for name, t in bundle.taps.items()}


def forward_tapped(net: TappedNetwork, batch: Tensor) -> FeatureBundle:
    """Run the layer stack, collecting tensors at every registered tap.

    Pure function of (parameters, batch): no randomness, no state mutation.
    """
    if batch.data.shape[1:] != tuple(net.input_shape):
        raise te.ShapeMismatch(
            f"batch shape {batch.data.shape[1:]} != expected {tuple(net.input_shape)}"
        )
    x = batch
    outputs = []
    for idx, spec in enumerate(net.layer_specs):
        if spec.kind == "conv":
            kernel = net.params[net.param_layers[idx] + ".kernel"]
            if spec.pad:
                x = te.pad2d(x, spec.pad)
            x = te.conv2d(x, kernel, stride=spec.stride)
        elif spec.kind == "relu":
            x = te.relu(x)
        elif spec.kind == "avgpool2":
            x = te.avgpool2(x)
        elif spec.kind == "flatten":
            x = te.reshape(x, (x.data.shape[0], -1))
        elif spec.kind == "linear":
            prefix = net.param_layers[idx]
            x = te.matmul(x, net.params[prefix + ".weight"]) + net.params[prefix + ".bias"]
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        outputs.append(x)
    taps = {name: outputs[i] for name, i in net.taps.items()}
    return FeatureBundle(taps=taps, logits=outputs[-1])


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_convnet(width_multiplier: int, input_shape: tuple, classes: int, seed) -> TappedNetwork:
    """Three conv stages with taps b1/b2/b3 at each stage output.

    Stage = 3x3 stride-1 conv (zero-padded to preserve extent) -> relu, with
    2x2 average pooling closing the first two stages.  Taps read the stage
    outputs, so on a 16x16 input at width 1 the taps are [N,8,8,8],
    [N,16,4,4], [N,32,4,4].  Requires H, W >= 8.
    """
    c, h, w = (int(v) for v in input_shape)
    if h < 8 or w < 8:
        raise BadShape(f"convnet needs spatial extent >= 8, got {h}x{w}")
    if width_multiplier < 1:
        raise BadShape(f"width multiplier must be >= 1, got {width_multiplier}")
    rng = np.random.default_rng(seed)
    widths = [ch * width_multiplier for ch in CONV_STAGE_CHANNELS]

    specs: list[LayerSpec] = []
    params: dict[str, Tensor] = {}
    param_layers: dict[int, str] = {}
    taps: dict[str, int] = {}

    in_ch, eh, ew = c, h, w
    for stage, out_ch in enumerate(widths, start=1):
        name = f"conv{stage}"
        kshape = (out_ch, in_ch, 3, 3)
        params[name + ".kernel"] = Tensor(
            _kaiming_uniform(rng, kshape, in_ch * 9), requires_grad=True
        )
        param_layers[len(specs)] = name
        specs.append(LayerSpec(kind="conv", in_ch=in_ch, out_ch=out_ch, kernel=3, pad=1))
        specs.append(LayerSpec(kind="relu"))
        if stage < 3:
            specs.append(LayerSpec(kind="avgpool2"))
            eh, ew = eh // 2, ew // 2
        taps[f"b{stage}"] = len(specs) - 1
        in_ch = out_ch

    specs.append(LayerSpec(kind="flatten"))
    flat = widths[-1] * eh * ew
    params["fc.weight"] = Tensor(
        _kaiming_uniform(rng, (flat, classes), flat), requires_grad=True
    )
    params["fc.bias"] = Tensor(np.zeros(classes), requires_grad=True)
    param_layers[len(specs)] = "fc"
    specs.append(LayerSpec(kind="linear", in_dim=flat, out_dim=classes))

    return TappedNetwork(
        layer_specs=specs,
        params=params,
        taps=taps,
        input_shape=(c, h, w),
        logits_dim=classes,
        param_layers=param_layers,
    )


def build_mlp(hidden: list[int], input_dim: int, classes: int, seed) -> TappedNetwork:
    """Fully connected net with taps h1..hk on each post-relu hidden layer."""
    if input_dim < 1 or classes < 1 or any(hd < 1 for hd in hidden):
        raise BadShape("mlp sizes must be positive")
    rng = np.random.default_rng(seed)

    specs: list[LayerSpec] = []
    params: dict[str, Tensor] = {}
    param_layers: dict[int, str] = {}
    taps: dict[str, int] = {}

    in_dim = int(input_dim)
    for i, out_dim in enumerate(hidden, start=1):
        name = f"fc{i}"
        params[name + ".weight"] = Tensor(
            _kaiming_uniform(rng, (in_dim, out_dim), in_dim), requires_grad=True
        )
        params[name + ".bias"] = Tensor(np.zeros(out_dim), requires_grad=True)
        param_layers[len(specs)] = name
        specs.append(LayerSpec(kind="linear", in_dim=in_dim, out_dim=out_dim))
        specs.append(LayerSpec(kind="relu"))
        taps[f"h{i}"] = len(specs) - 1
        in_dim = out_dim

    params["head.weight"] = Tensor(
        _kaiming_uniform(rng, (in_dim, classes), in_dim), requires_grad=True
    )
    params["head.bias"] = Tensor(np.zeros(classes), requires_grad=True)
    param_layers[len(specs)] = "head"
    specs.append(LayerSpec(kind="linear", in_dim=in_dim, out_dim=classes))

    return TappedNetwork(
        layer_specs=specs,
        params=params,
        taps=taps,
        input_shape=(int(input_dim),),
        logits_dim=classes,
        param_layers=param_layers,
    )


def save_checkpoint(path, params: dict[str, np.ndarray | Tensor]):
    """Write named parameters: magic, version, then one record per parameter.

    Record layout: u32 name length, UTF-8 name, u32 rank, u32 dims,
    little-endian float64 payload.  All integers little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by save_checkpoint back into arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        payload = take(8 * count)
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return out


def load_into(net: TappedNetwork, params: dict[str, np.ndarray], frozen: bool = False):
    """Install checkpoint arrays into a network built with matching topology."""
    missing = set(net.params) - set(params)
    extra = set(params) - set(net.params)
    if missing or extra:
        raise CheckpointError(
            f"parameter names mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
        )
    for name, tensor in net.params.items():
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}"
            )
        tensor.data = np.ascontiguousarray(arr, dtype=np.float64)
        if tensor.grad is not None:
            tensor.grad = np.zeros_like(tensor.data)
    if frozen:
        net.freeze()
    return net
