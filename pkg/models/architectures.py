"""Encoder families and the four segmentation architectures built on them.

Every architecture maps a (B, 1, H, W) batch to per-pixel probabilities of the same
size. Encoders are reduced versions of four structural families, scaled by
width_scale from the full channel plan (64, 128, 256, 512, 512).
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
from database.checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from models import nnprims as nn
from models.dataio import ExperimentKind
from models.layers import BatchNorm2d, Conv2d, ConvBNReLU, ConvReLU, DepthwiseConv2d, Dropout, ForwardContext
from models.nnprims import ActivationPattern, ParamStore, Tensor
from utils.errors import CheckpointError, ConfigurationError, ShapeError
from utils.logging_utils import log_event

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ENCODER_CHANNELS = (64, 128, 256, 512, 512)
DEFAULT_WIDTH_SCALE = 1.0 / 8.0
MIN_WIDTH_SCALE = 1.0 / 64.0
IN_CHANNELS = 1
MERGE_POLICIES = ("add", "cat")


class EncoderFamily(Enum):
    PLAIN_CONV_STACK = "vgg-like"
    RESIDUAL = "resnet-like"
    DENSELY_CONNECTED = "densenet-like"
    DEPTHWISE_SEPARABLE = "mobilenet-like"

    @classmethod
    def parse(cls, text: str) -> "EncoderFamily":
        for family in cls:
            if text in (family.value, family.name, family.name.lower()):
                return family
        raise ConfigurationError("unknown encoder family {!r}; choose from {}".format(
            text, ", ".join(f.value for f in cls)))


class Architecture(Enum):
    UNET = "unet"
    LINKNET = "linknet"
    FPN = "fpn"
    PSPNET = "pspnet"

    @property
    def display_name(self) -> str:
        return {"unet": "Unet", "linknet": "Linknet", "fpn": "FPN", "pspnet": "PSPNet"}[self.value]

    @property
    def encoder_depth(self) -> int:
        return 3 if self is Architecture.PSPNET else 5

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        for arch in cls:
            if text.lower() in (arch.value, arch.name.lower()):
                return arch
        raise ConfigurationError("unknown architecture {!r}; choose from {}".format(
            text, ", ".join(a.value for a in cls)))


@dataclass(frozen=True)
class EncoderConfig:
    family: EncoderFamily = EncoderFamily.PLAIN_CONV_STACK
    depth: int = 5
    width_scale: float = DEFAULT_WIDTH_SCALE

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family.value, "depth": self.depth, "width_scale": self.width_scale}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EncoderConfig":
        return cls(EncoderFamily.parse(data["family"]), int(data.get("depth", 5)),
                   float(data.get("width_scale", DEFAULT_WIDTH_SCALE)))


@dataclass(frozen=True)
class WeightInit:
    """Random initialization from a seed, or warm start from a checkpoint"""
    kind: str = "random"
    seed: int = 0
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("random", "warmstart"):
            raise ConfigurationError("weight init kind must be random or warmstart, got {!r}".format(self.kind))
        if self.kind == "warmstart" and not self.checkpoint:
            raise ConfigurationError("warmstart init needs a checkpoint path")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "seed": self.seed, "checkpoint": self.checkpoint}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WeightInit":
        return cls(str(data.get("kind", "random")), int(data.get("seed", 0)), data.get("checkpoint"))


@dataclass(frozen=True)
class ArchitectureHyper:
    """Decoder hyperparameters per architecture, unscaled"""
    decoder_channels: Tuple[int, ...] = (256, 128, 64, 32, 16)
    decoder_batchnorm: bool = True
    pyramid_channels: int = 256
    segmentation_channels: int = 128
    merge: str = "add"
    dropout: float = 0.2
    psp_out_channels: int = 512
    psp_bins: Tuple[int, ...] = (1, 2, 3, 6)
    linknet_final_channels: int = 32

    def __post_init__(self):
        if self.merge not in MERGE_POLICIES:
            raise ConfigurationError("merge must be one of {}, got {!r}".format(MERGE_POLICIES, self.merge))

    @classmethod
    def for_architecture(cls, architecture: Architecture) -> "ArchitectureHyper":
        """Batch norm in the decoder only for Unet and Linknet"""
        if architecture in (Architecture.FPN, Architecture.PSPNET):
            return cls(decoder_batchnorm=False)
        return cls()

    def to_dict(self) -> Dict[str, Any]:
        return {"decoder_channels": list(self.decoder_channels), "decoder_batchnorm": self.decoder_batchnorm,
                "pyramid_channels": self.pyramid_channels, "segmentation_channels": self.segmentation_channels,
                "merge": self.merge, "dropout": self.dropout, "psp_out_channels": self.psp_out_channels,
                "psp_bins": list(self.psp_bins), "linknet_final_channels": self.linknet_final_channels}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArchitectureHyper":
        data = dict(data)
        for key in ("decoder_channels", "psp_bins"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class ModelConfig:
    """One cell of the benchmark matrix"""
    experiment: ExperimentKind
    architecture: Architecture
    encoder: EncoderConfig
    weight_init: WeightInit = field(default_factory=WeightInit)
    hyper: Optional[ArchitectureHyper] = None

    def __post_init__(self):
        if self.hyper is None:
            object.__setattr__(self, "hyper", ArchitectureHyper.for_architecture(self.architecture))

    @classmethod
    def create(cls, experiment: ExperimentKind, architecture: Architecture, family: EncoderFamily,
               width_scale: float = DEFAULT_WIDTH_SCALE, weight_init: Optional[WeightInit] = None) -> "ModelConfig":
        """Config with the encoder depth the architecture requires"""
        return cls(experiment, architecture, EncoderConfig(family, architecture.encoder_depth, width_scale),
                   weight_init or WeightInit())

    def validate(self) -> "ModelConfig":
        if self.encoder.depth not in (3, 5):
            raise ConfigurationError("encoder depth must be 3 or 5, got {}".format(self.encoder.depth))
        if self.encoder.depth != self.architecture.encoder_depth:
            raise ConfigurationError("{} requires encoder depth {}, got {}".format(
                self.architecture.display_name, self.architecture.encoder_depth, self.encoder.depth))
        if not self.encoder.width_scale > 0:
            raise ConfigurationError("width_scale must be positive")
        return self

    @property
    def slug(self) -> str:
        return "{}-{}-{}-{}".format(self.experiment.slug, self.architecture.value, self.encoder.family.value,
                                    self.weight_init.kind)

    def to_dict(self) -> Dict[str, Any]:
        return {"experiment": self.experiment.slug, "architecture": self.architecture.value,
                "encoder": self.encoder.to_dict(), "weight_init": self.weight_init.to_dict(),
                "hyper": self.hyper.to_dict(), "in_channels": IN_CHANNELS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        try:
            return cls(
                experiment=ExperimentKind.parse(data["experiment"]),
                architecture=Architecture.parse(data["architecture"]),
                encoder=EncoderConfig.from_dict(data["encoder"]),
                weight_init=WeightInit.from_dict(data.get("weight_init", {})),
                hyper=ArchitectureHyper.from_dict(data["hyper"]) if data.get("hyper") else None,
            )
        except (KeyError, TypeError) as e:
            raise ConfigurationError("invalid model config ({})".format(e)) from None

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_init(self, weight_init: WeightInit) -> "ModelConfig":
        return replace(self, weight_init=weight_init)


def scaled(channels: int, width_scale: float) -> int:
    return max(1, int(round(channels * width_scale)))


def encoder_channels(encoder: EncoderConfig) -> List[int]:
    """Output channels of each encoder stage"""
    return [scaled(c, encoder.width_scale) for c in ENCODER_CHANNELS[:encoder.depth]]


def dense_growth(channels: int) -> int:
    return max(1, channels // 4)


# Encoders

class _Stage:
    def __call__(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        raise NotImplementedError


class PlainStage(_Stage):
    """conv-bn-relu twice, then 2x2 max pooling"""

    def __init__(self, store, name, cin, cout):
        self.first = ConvBNReLU(store, name + ".conv1", cin, cout)
        self.second = ConvBNReLU(store, name + ".conv2", cout, cout)

    def __call__(self, ctx, x):
        return nn.max_pool2d(self.second(ctx, self.first(ctx, x)), ctx.pattern)


class ResidualStage(_Stage):
    """Strided two-conv residual block with a projected shortcut"""

    def __init__(self, store, name, cin, cout):
        self.first = ConvBNReLU(store, name + ".conv1", cin, cout, stride=2)
        self.second = ConvBNReLU(store, name + ".conv2", cout, cout, activation=False)
        self.shortcut = ConvBNReLU(store, name + ".shortcut", cin, cout, kernel=1, stride=2, activation=False)

    def __call__(self, ctx, x):
        main = self.second(ctx, self.first(ctx, x))
        return ctx.relu(nn.add(main, self.shortcut(ctx, x)))


class DenseStage(_Stage):
    """Two densely connected layers, a 1x1 transition and 2x2 average pooling"""

    def __init__(self, store, name, cin, cout):
        growth = dense_growth(cout)
        self.layer1 = ConvBNReLU(store, name + ".dense1", cin, growth)
        self.layer2 = ConvBNReLU(store, name + ".dense2", cin + growth, growth)
        self.transition = ConvBNReLU(store, name + ".transition", cin + 2 * growth, cout, kernel=1)

    def __call__(self, ctx, x):
        first = self.layer1(ctx, x)
        second = self.layer2(ctx, nn.channel_concat([x, first]))
        out = self.transition(ctx, nn.channel_concat([x, first, second]))
        return nn.avg_pool2d(out, (out.shape[2] // 2, out.shape[3] // 2))


class DepthwiseSeparableStage(_Stage):
    """Strided depthwise 3x3 then pointwise 1x1, each with batch norm and ReLU"""

    def __init__(self, store, name, cin, cout):
        self.depthwise = DepthwiseConv2d(store, name + ".depthwise", cin, stride=2)
        self.depthwise_bn = BatchNorm2d(store, name + ".depthwise_bn", cin)
        self.pointwise = ConvBNReLU(store, name + ".pointwise", cin, cout, kernel=1)

    def __call__(self, ctx, x):
        out = ctx.relu(self.depthwise_bn(ctx, self.depthwise(ctx, x)))
        return self.pointwise(ctx, out)


_STAGES = {
    EncoderFamily.PLAIN_CONV_STACK: PlainStage,
    EncoderFamily.RESIDUAL: ResidualStage,
    EncoderFamily.DENSELY_CONNECTED: DenseStage,
    EncoderFamily.DEPTHWISE_SEPARABLE: DepthwiseSeparableStage,
}


class Encoder:
    """Stack of `depth` stages, each halving resolution; returns every stage output"""

    def __init__(self, store: ParamStore, config: EncoderConfig):
        self.channels = encoder_channels(config)
        stage_cls = _STAGES[config.family]
        cin = IN_CHANNELS
        self.stages = []
        for i, cout in enumerate(self.channels, start=1):
            self.stages.append(stage_cls(store, "encoder.stage{}".format(i), cin, cout))
            cin = cout

    def __call__(self, ctx: ForwardContext, x: Tensor) -> List[Tensor]:
        features = []
        for stage in self.stages:
            x = stage(ctx, x)
            features.append(x)
        return features


# Decoders

def decoder_conv(store: ParamStore, name: str, cin: int, cout: int, batchnorm: bool, kernel: int = 3):
    """conv-bn-relu when the decoder uses batch norm, otherwise conv with bias and relu"""
    if batchnorm:
        return ConvBNReLU(store, name, cin, cout, kernel=kernel)
    return ConvReLU(store, name, cin, cout, kernel=kernel)


class UnetDecoder:
    def __init__(self, store, encoder_channels_: Sequence[int], config: ModelConfig):
        width = config.encoder.width_scale
        batchnorm = config.hyper.decoder_batchnorm
        decoder = [scaled(c, width) for c in config.hyper.decoder_channels]
        skips = list(reversed(encoder_channels_[:-1])) + [0]
        cin = encoder_channels_[-1]
        self.blocks = []
        for i, (cout, skip) in enumerate(zip(decoder, skips), start=1):
            name = "decoder.block{}".format(i)
            self.blocks.append((decoder_conv(store, name + ".conv1", cin + skip, cout, batchnorm),
                                decoder_conv(store, name + ".conv2", cout, cout, batchnorm)))
            cin = cout
        self.out_channels = cin

    def __call__(self, ctx, features):
        skips = list(reversed(features[:-1])) + [None]
        x = features[-1]
        for (first, second), skip in zip(self.blocks, skips):
            x = nn.upsample_nearest2x(x)
            if skip is not None:
                x = nn.channel_concat([x, skip])
            x = second(ctx, first(ctx, x))
        return x


class LinknetDecoder:
    """Bottlenecked upsampling blocks whose outputs are added to the encoder skips"""

    def __init__(self, store, encoder_channels_: Sequence[int], config: ModelConfig):
        outs = list(reversed(encoder_channels_[:-1])) + [scaled(config.hyper.linknet_final_channels,
                                                                config.encoder.width_scale)]
        batchnorm = config.hyper.decoder_batchnorm
        cin = encoder_channels_[-1]
        self.blocks = []
        for i, cout in enumerate(outs, start=1):
            name = "decoder.block{}".format(i)
            mid = max(1, cin // 4)
            self.blocks.append((decoder_conv(store, name + ".reduce", cin, mid, batchnorm, kernel=1),
                                decoder_conv(store, name + ".conv", mid, mid, batchnorm),
                                decoder_conv(store, name + ".expand", mid, cout, batchnorm, kernel=1)))
            cin = cout
        self.out_channels = cin

    def __call__(self, ctx, features):
        skips = list(reversed(features[:-1])) + [None]
        x = features[-1]
        for (reduce, conv, expand), skip in zip(self.blocks, skips):
            x = expand(ctx, conv(ctx, nn.upsample_nearest2x(reduce(ctx, x))))
            if skip is not None:
                x = nn.add(x, skip)
        return x


class FPNDecoder:
    """Top-down pyramid with 1x1 laterals and additive merging.

    The segmentation branches at 1/4 scale are summed (merge "add") or stacked along channels (merge "cat").
    """

    def __init__(self, store, encoder_channels_: Sequence[int], config: ModelConfig):
        width = config.encoder.width_scale
        pyramid = scaled(config.hyper.pyramid_channels, width)
        segmentation = scaled(config.hyper.segmentation_channels, width)
        levels = encoder_channels_[1:]
        self.laterals = [Conv2d(store, "decoder.lateral{}".format(i + 2), c, pyramid, kernel=1)
                         for i, c in enumerate(levels)]
        self.branches = []
        for i in range(len(levels)):
            n_up = i
            convs = [decoder_conv(store, "decoder.seg{}.conv{}".format(i + 2, j + 1),
                                  pyramid if j == 0 else segmentation, segmentation, config.hyper.decoder_batchnorm)
                     for j in range(max(1, n_up))]
            self.branches.append((convs, n_up))
        self.merge = config.hyper.merge
        self.dropout = Dropout(config.hyper.dropout)
        self.out_channels = segmentation * len(levels) if self.merge == "cat" else segmentation

    def __call__(self, ctx, features):
        levels = features[1:]
        merged = [None] * len(levels)
        top = None
        for i in reversed(range(len(levels))):
            lateral = self.laterals[i](ctx, levels[i])
            top = lateral if top is None else nn.add(nn.upsample_nearest2x(top), lateral)
            merged[i] = top
        outputs = []
        for (convs, n_up), level in zip(self.branches, merged):
            x = level
            for conv in convs:
                x = conv(ctx, x)
                if n_up:
                    x = nn.upsample_nearest2x(x)
            outputs.append(x)
        if self.merge == "cat":
            total = nn.channel_concat(outputs)
        else:
            total = outputs[0]
            for x in outputs[1:]:
                total = nn.add(total, x)
        return self.dropout(ctx, total)


class PSPDecoder:
    """Pyramid pooling over the last encoder map, bottleneck and dropout"""

    def __init__(self, store, encoder_channels_: Sequence[int], config: ModelConfig):
        channels = encoder_channels_[-1]
        reduced = max(1, channels // 4)
        self.bins = config.hyper.psp_bins
        self.branches = [Conv2d(store, "decoder.psp.bin{}".format(b), channels, reduced, kernel=1)
                         for b in self.bins]
        out = scaled(config.hyper.psp_out_channels, config.encoder.width_scale)
        self.bottleneck = decoder_conv(store, "decoder.bottleneck", channels + reduced * len(self.bins), out,
                                       config.hyper.decoder_batchnorm, kernel=1)
        self.dropout = Dropout(config.hyper.dropout)
        self.out_channels = out

    def __call__(self, ctx, features):
        x = features[-1]
        size = (x.shape[2], x.shape[3])
        pooled = [x]
        for b, conv in zip(self.bins, self.branches):
            branch = ctx.relu(conv(ctx, nn.avg_pool2d(x, (b, b))))
            pooled.append(nn.bilinear_resize(branch, size))
        return self.dropout(ctx, self.bottleneck(ctx, nn.channel_concat(pooled)))


_DECODERS = {
    Architecture.UNET: UnetDecoder,
    Architecture.LINKNET: LinknetDecoder,
    Architecture.FPN: FPNDecoder,
    Architecture.PSPNET: PSPDecoder,
}


class SegmentationModel:
    """Callable network bound to its ParamStore.

    model(x, training=False, rng=None, pattern=None) -> probabilities (B, 1, H, W).
    """

    def __init__(self, config: ModelConfig, store: ParamStore):
        self.config = config
        self.store = store
        self.divisor = 2 ** config.encoder.depth
        self.encoder = Encoder(store, config.encoder)
        self.decoder = _DECODERS[config.architecture](store, self.encoder.channels, config)
        self.head = Conv2d(store, "head", self.decoder.out_channels, 1, kernel=3)

    def check_input_shape(self, shape: Sequence[int]) -> None:
        height, width = shape[-2], shape[-1]
        if height % self.divisor or width % self.divisor:
            raise ShapeError("{} needs H and W divisible by {}, got {}x{}".format(
                self.config.architecture.display_name, self.divisor, height, width))

    def __call__(self, x, training: bool = False, rng: Optional[np.random.Generator] = None,
                 pattern: Optional[ActivationPattern] = None) -> Tensor:
        x = nn.as_tensor(x)
        if x.data.ndim != 4 or x.shape[1] != IN_CHANNELS:
            raise ShapeError("expected (B, {}, H, W) input, got {}".format(IN_CHANNELS, x.shape))
        self.check_input_shape(x.shape)
        ctx = ForwardContext(self.store, training, rng, pattern)
        logits = self.head(ctx, self.decoder(ctx, self.encoder(ctx, x)))
        if logits.shape[2:] != x.shape[2:]:
            logits = nn.bilinear_resize(logits, (x.shape[2], x.shape[3]))
        return nn.sigmoid(logits)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode probabilities for a (B, H, W) or (B, 1, H, W) array"""
        images = np.asarray(images, dtype=self.store.dtype)
        if images.ndim == 3:
            images = images[:, None]
        return self(images, training=False).data[:, 0]


def build(config: ModelConfig, input_shape: Optional[Sequence[int]] = None,
          dtype=np.float32) -> Tuple[SegmentationModel, ParamStore]:
    """Create the network and its parameter store (values zero until initialized).

    Raises:
        ConfigurationError: Encoder depth not allowed for the architecture.
        ShapeError: input_shape not divisible by 2**depth.
    """
    config.validate()
    store = ParamStore(dtype=dtype)
    model = SegmentationModel(config, store)
    if input_shape is not None:
        model.check_input_shape(input_shape)
    return model, store


# Checkpoints

@dataclass
class WarmstartReport:
    loaded: List[str]
    skipped: List[str]
    mismatched: List[str]

    @property
    def n_loaded(self) -> int:
        return len(self.loaded)


def store_checkpoint(store: ParamStore, config: Optional[ModelConfig] = None, epoch: int = 0,
                     val_loss: Optional[float] = None, prefix: Optional[str] = None) -> Checkpoint:
    """Checkpoint of the store's parameters and buffers, optionally only names under `prefix`"""
    state = store.state()
    if prefix is not None:
        state = type(state)((k, v) for k, v in state.items() if k.startswith(prefix))
    return Checkpoint(
        tensors=state,
        buffers=[name for name in state if name in store.buffers],
        model_config=None if config is None else config.to_dict(),
        model_config_hash="" if config is None else config.config_hash(),
        epoch=epoch,
        val_loss=val_loss,
    )


def save_checkpoint(path: PathLike, store: ParamStore, config: Optional[ModelConfig] = None, epoch: int = 0,
                    val_loss: Optional[float] = None, prefix: Optional[str] = None) -> None:
    write_checkpoint(path, store_checkpoint(store, config, epoch, val_loss, prefix))


def load_warmstart(store: ParamStore, checkpoint: PathLike, strict: bool = False) -> WarmstartReport:
    """Copy checkpoint tensors whose name and shape match entries of the store.

    Non-strict: unmatched store entries keep their current values and are reported as skipped.
    Strict: any missing, unexpected or shape-mismatched name fails.

    Raises:
        CheckpointError: Corrupt container, or any mismatch in strict mode (naming the parameter).
    """
    saved = read_checkpoint(checkpoint)
    targets = dict(store.entries)
    loaded, mismatched = [], []
    for name, value in saved.tensors.items():
        if name in targets:
            target = targets[name].value
        elif name in store.buffers:
            target = store.buffers[name]
        else:
            if strict:
                raise CheckpointError("unexpected parameter {}".format(name), checkpoint)
            mismatched.append(name)
            continue
        if target.shape != value.shape:
            if strict:
                raise CheckpointError("parameter {} has shape {}, store expects {}".format(
                    name, value.shape, target.shape), checkpoint)
            mismatched.append(name)
            continue
        target[...] = value.astype(target.dtype)
        loaded.append(name)
    loaded_set = set(loaded)
    skipped = [name for name in list(store.entries) + list(store.buffers) if name not in loaded_set]
    if strict and skipped:
        raise CheckpointError("parameter {} missing from checkpoint".format(skipped[0]), checkpoint)
    log_event(logger, "warmstart_loaded", checkpoint=str(checkpoint), loaded=len(loaded),
              skipped=len(skipped), mismatched=len(mismatched))
    return WarmstartReport(loaded=loaded, skipped=skipped, mismatched=mismatched)


def load_model(checkpoint: PathLike, dtype=np.float32) -> Tuple[SegmentationModel, ParamStore, Checkpoint]:
    """Rebuild the network recorded in a checkpoint and load all of its tensors"""
    saved = read_checkpoint(checkpoint)
    if not saved.model_config:
        raise CheckpointError("checkpoint carries no model config", checkpoint)
    config = ModelConfig.from_dict(saved.model_config)
    if saved.model_config_hash and config.config_hash() != saved.model_config_hash:
        raise CheckpointError("model config hash mismatch", checkpoint)
    model, store = build(config, dtype=dtype)
    load_warmstart(store, checkpoint, strict=True)
    return model, store, saved
