"""The detector and segmenter networks, plus the checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import ops
from .blocks import (
    AuxChannelProvider,
    ConfigurationError,
    ConvBNReLU,
    Conv,
    DecoderBlock,
    DecoderBlockSpec,
    EncoderBlock,
    EncoderBlockSpec,
    FrozenConvProvider,
    ModelParameters,
    StmBlock,
    StmStageSpec,
    _trace,
)
from .fileio import atomic_write_bytes
from .tensor import DTYPE, RngState, Tensor

MAGIC = b"CBSTM1\x00\x00"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _from_dict(cls, data: Mapping[str, Any], what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown {what} key(s): {', '.join(unknown)}")
    return cls(**data)


# --------------------------------------------------------------------------
# Configs


@dataclass(frozen=True)
class SbStmBrNetConfig:
    input_size: tuple[int, int] = (304, 304)
    in_channels: int = 3
    stem_width: int = 32
    stages: tuple[StmStageSpec, ...] = (
        StmStageSpec(32, 128),
        StmStageSpec(128, 256),
        StmStageSpec(256, 512),
    )
    dropout: float = 0.5
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(
            self, "stages", tuple(s if isinstance(s, StmStageSpec) else _stage_from(s) for s in self.stages)
        )
        if self.num_classes < 2:
            raise ConfigurationError("class count must be >= 2")
        if len(self.stages) != 3:
            raise ConfigurationError("the detector has exactly three STM stages")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout rate must lie in [0, 1)")
        if self.stem_width < 1 or self.in_channels < 1:
            raise ConfigurationError("widths must be >= 1")
        _check_divisible(self.input_size, 2 ** len(self.stages))

    @property
    def feature_width(self) -> int:
        return self.stages[-1].output_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["stages"] = [dict(s, dilations=list(s["dilations"])) for s in d["stages"]]
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SbStmBrNetConfig":
        return _from_dict(cls, data, "detector config")


def _stage_from(d: Mapping[str, Any]) -> StmStageSpec:
    d = dict(d)
    if "dilations" in d:
        d["dilations"] = tuple(d["dilations"])
    return _from_dict(StmStageSpec, d, "STM stage")


def _check_divisible(size, factor: int) -> None:
    h, w = size
    if h % factor or w % factor:
        raise ConfigurationError(f"input size {h}x{w} is not divisible by {factor}")


@dataclass(frozen=True)
class CovidCbResegConfig:
    input_size: tuple[int, int] = (304, 304)
    in_channels: int = 3
    encoder_widths: tuple[int, ...] = (32, 64, 128, 256)
    aux_widths: tuple[int, ...] | None = None
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        if self.aux_widths is None:
            object.__setattr__(self, "aux_widths", tuple(max(1, w // 2) for w in self.encoder_widths))
        else:
            object.__setattr__(self, "aux_widths", tuple(self.aux_widths))
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths):
            raise ConfigurationError("encoder widths must be non-empty and >= 1")
        if len(self.aux_widths) != len(self.encoder_widths):
            raise ConfigurationError("one aux width per decoder stage is required")
        if self.num_classes != 2:
            raise ConfigurationError("the segmenter separates lesion from background (2 classes)")
        _check_divisible(self.input_size, 2 ** len(self.encoder_widths))

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        """Output width of each decoder, deepest first."""
        e = self.encoder_widths
        return tuple(e[i - 1] if i > 0 else e[0] for i in reversed(range(len(e))))

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "in_channels": self.in_channels,
            "encoder_widths": list(self.encoder_widths),
            "aux_widths": list(self.aux_widths),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CovidCbResegConfig":
        return _from_dict(cls, data, "segmenter config")


# --------------------------------------------------------------------------
# Networks


def _check_input(x: Tensor, in_channels: int, factor: int) -> None:
    if x.data.ndim != 4 or x.shape[1] != in_channels:
        raise ops.ShapeError(f"expected N x {in_channels} x H x W input, got {x.shape}")
    _check_divisible(x.shape[2:], factor)


class Classifier:
    """Stem conv, three STM stages each followed by 2x2 max-pool, then
    global average pool, dropout, a dense layer and softmax."""

    kind = "classifier"

    def __init__(self, config: SbStmBrNetConfig, seed: int, provider: AuxChannelProvider | None = None):
        self.config, self.seed = config, seed
        self.params = ModelParameters()
        rng = RngState(seed, 1)
        self.stem = ConvBNReLU(self.params, "stem", rng, config.in_channels, config.stem_width, 3)
        self.stages = []
        cin = config.stem_width
        for i, spec in enumerate(config.stages):
            self.stages.append(StmBlock(self.params, f"stm{i}", rng, cin, spec))
            cin = spec.output_width
        c = config.feature_width
        self.fc_weight = self.params.add("head.fc.weight", rng.normal((config.num_classes, c), np.sqrt(2.0 / c)))
        self.fc_bias = self.params.add("head.fc.bias", np.zeros(config.num_classes))
        widths = {k: v for st in self.stages for k, v in st.aux_ids().items()}
        if provider is None:
            provider = FrozenConvProvider.random(seed + 7919, widths, config.in_channels)
            provider.register(self.params)
        self.provider = provider

    def features(self, x: Tensor, mode: str = "eval") -> Tensor:
        """Globally pooled output of the last stage (N x C x 1 x 1)."""
        _check_input(x, self.config.in_channels, 2 ** len(self.stages))
        h = self.stem(x, mode)
        _trace("stem.out", h)
        for stage in self.stages:
            h = ops.max_pool2d(stage(h, x, self.provider, mode), 2, 2)
        return ops.global_avg_pool(h)

    def logits(self, x: Tensor, mode: str = "eval", rng: RngState | None = None) -> Tensor:
        h = ops.dropout(self.features(x, mode), self.config.dropout, rng, mode)
        return ops.fully_connected(h, self.fc_weight, self.fc_bias)

    def forward(self, x: Tensor, mode: str = "eval", rng: RngState | None = None) -> Tensor:
        return ops.softmax(self.logits(x, mode, rng))

    __call__ = forward


class Segmenter:
    """Region/boundary encoders, channel-boosted decoders and a 2x2 pixel classifier."""

    kind = "segmenter"

    def __init__(self, config: CovidCbResegConfig, seed: int, provider: AuxChannelProvider | None = None):
        self.config, self.seed = config, seed
        self.params = ModelParameters()
        rng = RngState(seed, 2)
        self.encoders = []
        cin = config.in_channels
        for i, w in enumerate(config.encoder_widths):
            self.encoders.append(EncoderBlock(self.params, f"enc{i}", rng, EncoderBlockSpec(cin, w)))
            cin = w
        self.decoders = []
        for i, out_w in zip(reversed(range(len(config.encoder_widths))), config.decoder_widths):
            spec = DecoderBlockSpec(config.encoder_widths[i], out_w, config.aux_widths[i])
            self.decoders.append(DecoderBlock(self.params, f"dec{i}", rng, spec))
        self.head = Conv(self.params, "head.conv", rng, config.encoder_widths[0], config.num_classes, 2)
        if provider is None:
            widths = {f"dec{i}": a for i, a in enumerate(config.aux_widths)}
            provider = FrozenConvProvider.random(seed + 7919, widths, config.in_channels)
            provider.register(self.params)
        self.provider = provider

    def logits(self, x: Tensor, mode: str = "eval", rng: RngState | None = None) -> Tensor:
        _check_input(x, self.config.in_channels, 2 ** len(self.encoders))
        h = x
        indices = []
        for enc in self.encoders:
            h, idx = enc(h, mode)
            indices.append(idx)
        for dec, idx in zip(self.decoders, reversed(indices)):
            h = dec(h, idx, x, self.provider, mode)
        return self.head(h)

    def forward(self, x: Tensor, mode: str = "eval", rng: RngState | None = None) -> Tensor:
        return ops.softmax(self.logits(x, mode, rng))

    __call__ = forward


def build_classifier(config: SbStmBrNetConfig, seed: int, provider: AuxChannelProvider | None = None) -> Classifier:
    return Classifier(config, seed, provider)


def build_segmenter(config: CovidCbResegConfig, seed: int, provider: AuxChannelProvider | None = None) -> Segmenter:
    return Segmenter(config, seed, provider)


def extract_features(classifier: Classifier, x: Tensor) -> np.ndarray:
    """Post-pool, pre-dropout feature vector per image, shape (N, C)."""
    from .tensor import no_grad

    with no_grad():
        return classifier.features(x, "eval").data[:, :, 0, 0].copy()


# --------------------------------------------------------------------------
# Checkpoints


def write_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = dict(meta)
    manifest["version"] = FORMAT_VERSION
    manifest["tensors"] = entries
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    atomic_write_bytes(path, MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise LengthMismatchError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + mlen > len(raw):
        raise LengthMismatchError(f"{path}: manifest runs past end of file")
    manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {manifest.get('version')}, expected {FORMAT_VERSION}")
    payload = memoryview(raw)[16 + mlen :]
    expected = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["tensors"])
    if expected != len(payload):
        raise LengthMismatchError(f"{path}: manifest declares {expected} payload bytes, found {len(payload)}")
    arrays = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(DTYPE)
    return arrays, manifest


def save_checkpoint(model, path) -> None:
    meta = {"kind": model.kind, "config": model.config.to_dict(), "seed": model.seed}
    write_checkpoint(path, model.params.state_arrays(), meta)


def config_from_manifest(manifest: Mapping[str, Any]):
    kind = manifest.get("kind")
    if kind == "classifier":
        return SbStmBrNetConfig.from_dict(manifest["config"])
    if kind == "segmenter":
        return CovidCbResegConfig.from_dict(manifest["config"])
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_checkpoint(path, config=None):
    """Rebuild the stored model.

    When ``config`` is given the tensors are loaded into a model built from
    it instead, so an incompatible checkpoint fails with
    :class:`ShapeMismatchError` naming the first offending tensor.
    """
    arrays, manifest = read_checkpoint(path)
    if config is None:
        config = config_from_manifest(manifest)
    seed = int(manifest.get("seed", 0))
    model = build_classifier(config, seed) if isinstance(config, SbStmBrNetConfig) else build_segmenter(config, seed)
    model.params.load_arrays(arrays)
    return model
