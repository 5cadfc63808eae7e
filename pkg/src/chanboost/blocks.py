"""Composite blocks: split-transform-merge stages with channel boosting,
region/boundary encoder and decoder stages, and auxiliary-channel providers.
"""

from __future__ import annotations

import contextlib
import threading
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Protocol

import numpy as np

from . import ops
from .ops import PoolIndices, RunningStats, ShapeError
from .tensor import DTYPE, RngState, Tensor, no_grad


class ConfigurationError(ValueError):
    pass


class DecoderPairingError(ValueError):
    pass


# --------------------------------------------------------------------------
# Parameter registry


class ModelParameters:
    """Ordered name -> tensor registry with trainable flags and BN buffers."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.trainable: dict[str, bool] = {}
        self.stats: dict[str, RunningStats] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.tensors or name in self.stats:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=DTYPE), requires_grad=trainable, name=name)
        self.tensors[name] = t
        self.trainable[name] = trainable
        return t

    def adopt(self, name: str, tensor: Tensor) -> Tensor:
        """Register an existing tensor as a frozen entry."""
        if name in self.tensors or name in self.stats:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = False
        tensor.name = name
        self.tensors[name] = tensor
        self.trainable[name] = False
        return tensor

    def add_stats(self, name: str, channels: int) -> RunningStats:
        if name in self.stats or name in self.tensors:
            raise ConfigurationError(f"duplicate buffer name {name!r}")
        rs = RunningStats.fresh(channels)
        self.stats[name] = rs
        return rs

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.tensors.items() if self.trainable[k]]

    def frozen_items(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.tensors.items() if not self.trainable[k]]

    def count(self, trainable_only: bool = False) -> int:
        return sum(t.data.size for k, t in self.tensors.items() if self.trainable[k] or not trainable_only)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Weights followed by BN running moments, in registration order."""
        out = {k: t.data for k, t in self.tensors.items()}
        for k, rs in self.stats.items():
            out[f"{k}.running_mean"] = rs.mean
            out[f"{k}.running_var"] = rs.var
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        from .models import ShapeMismatchError

        expected = {k: v.shape for k, v in self.state_arrays().items()}
        for name, shape in expected.items():
            if name not in arrays:
                raise ShapeMismatchError(f"tensor {name!r} missing from checkpoint")
            if tuple(arrays[name].shape) != tuple(shape):
                raise ShapeMismatchError(
                    f"tensor {name!r} has shape {tuple(arrays[name].shape)}, model expects {tuple(shape)}"
                )
        extra = [k for k in arrays if k not in expected]
        if extra:
            raise ShapeMismatchError(f"checkpoint tensor {extra[0]!r} has no counterpart in the model")
        for k, t in self.tensors.items():
            t.data = np.array(arrays[k], dtype=DTYPE)
        for k, rs in self.stats.items():
            rs.mean = np.array(arrays[f"{k}.running_mean"], dtype=DTYPE)
            rs.var = np.array(arrays[f"{k}.running_var"], dtype=DTYPE)

    def checksum(self, names=None) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in names if names is not None else self.tensors:
            h.update(k.encode())
            h.update(self.tensors[k].data.tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# Shape tracing


_trace_state = threading.local()


@contextlib.contextmanager
def trace_shapes() -> Iterator[list[tuple[str, tuple[int, ...]]]]:
    """Collect (tag, shape) pairs emitted by blocks during a forward pass."""
    prev = getattr(_trace_state, "records", None)
    records: list[tuple[str, tuple[int, ...]]] = []
    _trace_state.records = records
    try:
        yield records
    finally:
        _trace_state.records = prev


def _trace(tag: str, t: Tensor) -> None:
    records = getattr(_trace_state, "records", None)
    if records is not None:
        records.append((tag, t.shape))


# --------------------------------------------------------------------------
# Layers


class Conv:
    def __init__(
        self,
        store: ModelParameters,
        name: str,
        rng: RngState,
        in_ch: int,
        out_ch: int,
        kernel: int = 3,
        dilation: int = 1,
        padding: int | str = "same",
        trainable: bool = True,
    ):
        fan_in = in_ch * kernel * kernel
        self.weight = store.add(f"{name}.weight", ops.he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in), trainable)
        self.bias = store.add(f"{name}.bias", np.zeros(out_ch), trainable)
        self.dilation = dilation
        self.padding = padding
        self.out_ch = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, dilation=self.dilation, padding=self.padding)


class ConvBNReLU:
    """Convolution followed by batch norm and relu."""

    def __init__(self, store: ModelParameters, name: str, rng: RngState, in_ch: int, out_ch: int,
                 kernel: int = 3, dilation: int = 1):
        self.conv = Conv(store, f"{name}.conv", rng, in_ch, out_ch, kernel, dilation)
        self.gamma = store.add(f"{name}.bn.gamma", np.ones(out_ch))
        self.beta = store.add(f"{name}.bn.beta", np.zeros(out_ch))
        self.stats = store.add_stats(f"{name}.bn", out_ch)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        y = self.conv(x)
        n, _, h, w = y.shape
        if mode == "train" and n * h * w < 2:
            mode = "eval"  # one value per channel has no batch variance
        return ops.relu(ops.batch_norm(y, self.gamma, self.beta, self.stats, mode))


# --------------------------------------------------------------------------
# Auxiliary (transfer-learned) channel providers


class AuxChannelProvider(Protocol):
    widths: Mapping[str, int]

    def produce(self, image: Tensor, stage_id: str, size: tuple[int, int]) -> Tensor:
        ...


def _stage_key(stage_id: str) -> int:
    return zlib.crc32(stage_id.encode())


def _downsample_to(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = image.shape[2:]
    th, tw = size
    if (h, w) == (th, tw):
        return image
    if h % th or w % tw or h // th != w // tw:
        raise ShapeError(f"cannot area-downsample {h}x{w} to {th}x{tw}")
    f = h // th
    return ops.avg_pool2d(Tensor(image), f, f).data


@dataclass
class FrozenConvProvider:
    """Two frozen 3x3 conv+relu layers per stage, run on the area-downsampled image.

    Outputs are computed without graph construction, so no gradient reaches
    the provider or flows back through it.
    """

    widths: dict[str, int]
    in_channels: int = 3
    weights: dict[str, list[tuple[Tensor, Tensor]]] = field(default_factory=dict)

    @classmethod
    def random(cls, seed: int, widths: Mapping[str, int], in_channels: int = 3) -> "FrozenConvProvider":
        weights = {}
        for sid, width in widths.items():
            if width < 1:
                raise ConfigurationError(f"aux width for {sid!r} must be >= 1")
            rng = RngState(seed, _stage_key(sid))
            layers = []
            cin = in_channels
            for _ in range(2):
                w = ops.he_normal(rng, (width, cin, 3, 3), cin * 9)
                layers.append((Tensor(w), Tensor(np.zeros(width))))
                cin = width
            weights[sid] = layers
        return cls(dict(widths), in_channels, weights)

    def produce(self, image: Tensor, stage_id: str, size: tuple[int, int]) -> Tensor:
        if stage_id not in self.weights:
            raise ConfigurationError(f"provider has no stage {stage_id!r}")
        with no_grad():
            x = Tensor(_downsample_to(image.data, size))
            for w, b in self.weights[stage_id]:
                x = ops.relu(ops.conv2d(x, w, b, padding="same"))
        if x.shape[1] != self.widths[stage_id]:
            raise ConfigurationError(f"stage {stage_id!r} produced {x.shape[1]} channels")
        return x

    def register(self, store: ModelParameters, prefix: str = "aux") -> None:
        """Expose the frozen weights in ``store`` so checkpoints carry them."""
        for sid, layers in self.weights.items():
            for i, (w, b) in enumerate(layers):
                store.adopt(f"{prefix}.{sid}.conv{i}.weight", w)
                store.adopt(f"{prefix}.{sid}.conv{i}.bias", b)


class ZeroProvider:
    """All-zero auxiliary channels; handy as an ablation and in tests."""

    def __init__(self, widths: Mapping[str, int]):
        self.widths = dict(widths)

    def produce(self, image: Tensor, stage_id: str, size: tuple[int, int]) -> Tensor:
        return Tensor(np.zeros((image.shape[0], self.widths[stage_id]) + tuple(size)))


def frozen_random_provider(seed: int, stage_widths: Mapping[str, int], in_channels: int = 3) -> FrozenConvProvider:
    return FrozenConvProvider.random(seed, stage_widths, in_channels)


def checkpoint_provider(path, stage_widths: Mapping[str, int], prefix: str = "aux") -> FrozenConvProvider:
    """Provider whose frozen layers are read from a checkpoint file."""
    from .models import read_checkpoint

    arrays, _ = read_checkpoint(path)
    weights = {}
    in_channels = None
    for sid, width in stage_widths.items():
        layers = []
        i = 0
        while f"{prefix}.{sid}.conv{i}.weight" in arrays:
            w = arrays[f"{prefix}.{sid}.conv{i}.weight"]
            b = arrays[f"{prefix}.{sid}.conv{i}.bias"]
            layers.append((Tensor(w), Tensor(b)))
            i += 1
        if not layers:
            raise ConfigurationError(f"checkpoint has no auxiliary layers for stage {sid!r}")
        if layers[-1][0].shape[0] != width:
            raise ConfigurationError(
                f"stage {sid!r}: checkpoint provides {layers[-1][0].shape[0]} channels, {width} declared"
            )
        in_channels = layers[0][0].shape[1]
        weights[sid] = layers
    return FrozenConvProvider(dict(stage_widths), in_channels or 3, weights)


# --------------------------------------------------------------------------
# Split-transform-merge stage


@dataclass(frozen=True)
class StmStageSpec:
    branch_width: int
    output_width: int
    dilations: tuple[int, int, int, int] = (1, 2, 1, 2)
    pool_window: int = 3
    aux_width: int | None = None

    def __post_init__(self):
        if self.branch_width < 1 or self.output_width < 1:
            raise ConfigurationError("branch and output widths must be >= 1")
        if len(self.dilations) != 4:
            raise ConfigurationError("an STM stage has exactly four branches")
        if any(d < 1 for d in self.dilations):
            raise ConfigurationError("dilations must be >= 1")

    @property
    def aux_channels(self) -> int:
        return self.aux_width if self.aux_width is not None else self.branch_width


@dataclass(frozen=True)
class SqueezeBoostSpec:
    source_width: int
    fused_width: int

    def __post_init__(self):
        if self.source_width < 1 or self.fused_width < 1:
            raise ConfigurationError("squeeze widths must be >= 1")


def squeeze_channels(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 projection to ``weight.shape[0]`` channels."""
    if weight.shape[2:] != (1, 1):
        raise ShapeError("squeeze kernel must be 1x1")
    return ops.conv2d(x, weight, bias)


class StmBlock:
    """Four-branch split-transform-merge stage.

    Branches B and C apply dilated convs to the input; D and E take frozen
    auxiliary channels. B and D pass through region smoothing (average
    pool), C and E through boundary emphasis (max pool). Each branch is
    squeezed to ``branch_width`` before concatenation.
    """

    BRANCHES = ("B", "C", "D", "E")

    def __init__(self, store: ModelParameters, name: str, rng: RngState, in_ch: int, spec: StmStageSpec):
        self.name, self.spec, self.in_ch = name, spec, in_ch
        ws = spec.branch_width
        dB, dC, _, _ = spec.dilations
        self.conv_b = ConvBNReLU(store, f"{name}.B.dconv", rng, in_ch, ws, 3, dB)
        self.conv_c = ConvBNReLU(store, f"{name}.C.dconv", rng, in_ch, ws, 3, dC)
        self.squeeze = {
            br: ConvBNReLU(store, f"{name}.{br}.squeeze", rng, ws if br in "BC" else spec.aux_channels, ws, 1)
            for br in self.BRANCHES
        }
        self.fuse = ConvBNReLU(store, f"{name}.fuse", rng, 4 * ws, spec.output_width, 1)

    def aux_ids(self) -> dict[str, int]:
        return {f"{self.name}.D": self.spec.aux_channels, f"{self.name}.E": self.spec.aux_channels}

    def region(self, x: Tensor) -> Tensor:
        return ops.avg_pool2d(x, self.spec.pool_window, 1, "same")

    def boundary(self, x: Tensor) -> Tensor:
        return ops.max_pool2d(x, self.spec.pool_window, 1, "same")

    def boosted(self, x: Tensor, image: Tensor, aux: AuxChannelProvider, mode: str) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"{self.name} expects {self.in_ch} channels, got {x.shape[1]}")
        size = x.shape[2:]
        aux_d = aux.produce(image, f"{self.name}.D", size)
        aux_e = aux.produce(image, f"{self.name}.E", size)
        for a in (aux_d, aux_e):
            if a.shape[0] != x.shape[0] or a.shape[2:] != size:
                raise ShapeError(f"aux tensor {a.shape} does not match block input {x.shape}")
        xb = self.squeeze["B"](self.region(self.conv_b(x, mode)), mode)
        xc = self.squeeze["C"](self.boundary(self.conv_c(x, mode)), mode)
        xd = self.squeeze["D"](self.region(aux_d), mode)
        xe = self.squeeze["E"](self.boundary(aux_e), mode)
        out = ops.concat_channels([xb, xc, xd, xe])
        _trace(f"{self.name}.boosted", out)
        return out

    def __call__(self, x: Tensor, image: Tensor, aux: AuxChannelProvider, mode: str = "train") -> Tensor:
        out = self.fuse(self.boosted(x, image, aux, mode), mode)
        _trace(f"{self.name}.out", out)
        return out


# --------------------------------------------------------------------------
# Encoder / decoder stages


@dataclass(frozen=True)
class EncoderBlockSpec:
    in_channels: int
    out_channels: int
    conv_count: int = 2
    pool_window: int = 2
    pool_stride: int = 2


@dataclass(frozen=True)
class DecoderBlockSpec:
    in_channels: int
    out_channels: int
    aux_channels: int
    conv_count: int = 1
    factor: int = 2


class EncoderBlock:
    """Conv stack, then average and max pooling fused by a 1x1 conv (average first)."""

    def __init__(self, store: ModelParameters, name: str, rng: RngState, spec: EncoderBlockSpec):
        self.name, self.spec = name, spec
        self.convs = []
        cin = spec.in_channels
        for i in range(spec.conv_count):
            self.convs.append(ConvBNReLU(store, f"{name}.conv{i}", rng, cin, spec.out_channels, 3))
            cin = spec.out_channels
        self.fuse = ConvBNReLU(store, f"{name}.fuse", rng, 2 * cin, spec.out_channels, 1)

    def __call__(self, x: Tensor, mode: str = "train") -> tuple[Tensor, PoolIndices]:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"{self.name} expects {self.spec.in_channels} channels, got {x.shape[1]}")
        for conv in self.convs:
            x = conv(x, mode)
        w, s = self.spec.pool_window, self.spec.pool_stride
        pad = "same" if (x.shape[2] % s or x.shape[3] % s) else 0
        avg = ops.avg_pool2d(x, w, s, pad)
        mx, idx = ops.max_pool2d_with_indices(x, w, s, pad)
        cat = ops.concat_channels([avg, mx])
        _trace(f"{self.name}.region_boundary", cat)
        out = self.fuse(cat, mode)
        _trace(f"{self.name}.out", out)
        return out, idx


class DecoderBlock:
    """Index unpooling (boundary) and nearest upsampling (region), fused max
    first, then boosted with frozen auxiliary channels and squeezed."""

    def __init__(self, store: ModelParameters, name: str, rng: RngState, spec: DecoderBlockSpec):
        self.name, self.spec = name, spec
        c = spec.in_channels
        self.fuse = ConvBNReLU(store, f"{name}.fuse", rng, 2 * c, c, 1)
        self.squeeze = ConvBNReLU(store, f"{name}.squeeze", rng, c + spec.aux_channels, spec.out_channels, 1)
        self.refine = [
            ConvBNReLU(store, f"{name}.refine{i}", rng, spec.out_channels, spec.out_channels, 3)
            for i in range(spec.conv_count)
        ]

    def region_boundary(self, x: Tensor, indices: PoolIndices | None) -> Tensor:
        if indices is None:
            raise DecoderPairingError(f"{self.name} needs pool indices from its mirrored encoder")
        if indices.indices.shape != x.shape:
            raise DecoderPairingError(
                f"{self.name}: indices shape {indices.indices.shape} does not match features {x.shape}"
            )
        boundary = ops.max_unpool2d(x, indices)
        th, tw = indices.input_shape[2:]
        region = ops.crop2d(ops.upsample_nearest(x, self.spec.factor), th, tw)
        return ops.concat_channels([boundary, region])

    def boosted(self, x: Tensor, indices: PoolIndices | None, image: Tensor, aux: AuxChannelProvider,
                mode: str) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"{self.name} expects {self.spec.in_channels} channels, got {x.shape[1]}")
        fre = self.fuse(self.region_boundary(x, indices), mode)
        extra = aux.produce(image, self.name, fre.shape[2:])
        if extra.shape[1] != self.spec.aux_channels or extra.shape[2:] != fre.shape[2:]:
            raise ShapeError(f"{self.name}: aux tensor {extra.shape} does not fit {fre.shape}")
        out = ops.concat_channels([fre, extra])
        _trace(f"{self.name}.boosted", out)
        return out

    def __call__(self, x: Tensor, indices: PoolIndices | None, image: Tensor, aux: AuxChannelProvider,
                 mode: str = "train") -> Tensor:
        out = self.squeeze(self.boosted(x, indices, image, aux, mode), mode)
        for conv in self.refine:
            out = conv(out, mode)
        _trace(f"{self.name}.out", out)
        return out
