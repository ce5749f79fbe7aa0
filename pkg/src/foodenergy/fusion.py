"""Feature adaptation: per-stream backbones, cross-domain normalization and regression.

Each active input stream (RGB image, energy density map, depth map) goes
through its own convolutional trunk.  The 7x7 feature tensors are
optionally normalized, concatenated along channels and regressed to a
single scaled energy value by a two-layer head.

Feature tensors are channel-first, ``(C, 7, 7)`` per sample, following
torch convention.
"""

from __future__ import annotations

import enum
import logging
import os
import unicodedata
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torchvision.models import vgg16

from .objective import TrainingConfig, compute_loss, lr_at_epoch

logger = logging.getLogger(__name__)

WEIGHTS_ENV = "FOODENERGY_VGG16_WEIGHTS"
STANDARD_SIDE, STANDARD_CHANNELS = 224, 512
REDUCED_SIDE, REDUCED_CHANNELS = 56, 32
FEATURE_GRID = 7
STD_FLOOR = 1e-8
LAYER_EPS = 1e-8
GROUP_SIZE = 32


class Stream(str, enum.Enum):
    RGB = "rgb"
    DENSITY = "density"
    DEPTH = "depth"

    @property
    def channels(self) -> int:
        return 3 if self is Stream.RGB else 1


STREAM_ORDER = (Stream.RGB, Stream.DENSITY, Stream.DEPTH)
_SYMBOL = {Stream.RGB: "x", Stream.DENSITY: "y", Stream.DEPTH: "z"}


class NormalizationMode(str, enum.Enum):
    NONE = "none"
    ZSCORE = "zscore"
    LAYER = "layer"
    LAYER_GROUP = "layer_group"


def ordered_streams(streams) -> tuple:
    """Canonical (RGB, DENSITY, DEPTH) order restricted to ``streams``."""
    wanted = {Stream(s) for s in streams}
    if not wanted:
        raise ValueError("at least one stream is required")
    return tuple(s for s in STREAM_ORDER if s in wanted)


def table_label(streams, normalization) -> str:
    """Row notation such as ``y_f`` or ``(ỹ_f, z̃_f)``."""
    streams = ordered_streams(streams)
    tilde = "̃" if NormalizationMode(normalization) is not NormalizationMode.NONE else ""
    parts = [f"{_SYMBOL[s]}{tilde}_f" for s in streams]
    label = parts[0] if len(parts) == 1 else "(" + ", ".join(parts) + ")"
    return unicodedata.normalize("NFC", label)


@dataclass(frozen=True)
class AblationConfig:
    streams: tuple
    normalization: NormalizationMode = NormalizationMode.NONE
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "streams", ordered_streams(self.streams))
        object.__setattr__(self, "normalization", NormalizationMode(self.normalization))
        expected = table_label(self.streams, self.normalization)
        if not self.label:
            object.__setattr__(self, "label", expected)
        elif unicodedata.normalize("NFC", self.label) != expected:
            raise ValueError(f"label {self.label!r} does not match streams/normalization "
                             f"({expected!r})")

    @property
    def key(self) -> str:
        names = "+".join(s.value for s in self.streams)
        return names if self.normalization is NormalizationMode.NONE else f"{names}/{self.normalization.value}"


def default_ablation_configs() -> list[AblationConfig]:
    """The eight comparison rows: single streams, then pairs with and without normalization."""
    N, G = NormalizationMode.NONE, NormalizationMode.LAYER_GROUP
    R, D, Z = Stream.RGB, Stream.DENSITY, Stream.DEPTH
    rows = [((R,), N), ((D,), N), ((Z,), N),
            ((R, D), N), ((R, D), G),
            ((D, Z), N), ((D, Z), G),
            ((R, D, Z), G)]
    return [AblationConfig(s, m) for s, m in rows]


@dataclass
class FeatureTensor:
    values: torch.Tensor  # (C, 7, 7)
    stream: Stream
    normalized: bool = False

    @property
    def shape(self):
        return tuple(self.values.shape)


class Backbone(nn.Module):
    """Convolutional trunk producing a 7x7 feature grid from a fixed-size input.

    The standard trunk is the VGG-16 convolutional stack (fully connected
    layers removed): 224x224 in, 512x7x7 out.  The reduced trunk is a
    three-stage conv/pool stack: 56x56 in, 32x7x7 out.  Single-channel
    inputs are repeated across the three input channels.
    """

    def __init__(self, reduced=False, weights_path=None, auto_resize=True):
        super().__init__()
        self.reduced = reduced
        self.auto_resize = auto_resize
        if reduced:
            self.input_side, self.out_channels = REDUCED_SIDE, REDUCED_CHANNELS
            layers, prev = [], 3
            for width in (8, 16, REDUCED_CHANNELS):
                layers += [nn.Conv2d(prev, width, 3, padding=1), nn.ReLU(inplace=True),
                           nn.AvgPool2d(2)]
                prev = width
            self.features = nn.Sequential(*layers)
            # same scheme torchvision uses for an untrained VGG trunk; zero biases keep
            # ReLU channels from being dead on every input at initialization
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                    nn.init.zeros_(m.bias)
        else:
            self.input_side, self.out_channels = STANDARD_SIDE, STANDARD_CHANNELS
            self.features = vgg16(weights=None).features
            weights_path = weights_path or os.environ.get(WEIGHTS_ENV)
            if weights_path:
                self.load_vgg_weights(weights_path)

    def load_vgg_weights(self, path):
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k.removeprefix("features."): v for k, v in state.items()
                 if not k.startswith("classifier.")}
        self.features.load_state_dict(state)
        logger.info("loaded backbone weights from %s", path)

    def prepare(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        if x.shape[-2:] != (self.input_side, self.input_side):
            if not self.auto_resize:
                raise ValueError(f"backbone expects {self.input_side}x{self.input_side} input, "
                                 f"got {tuple(x.shape[-2:])}")
            x = F.interpolate(x, size=(self.input_side, self.input_side), mode="bilinear",
                              align_corners=False)
        return x

    def forward(self, x):
        return self.features(self.prepare(x))


def _image_to_batch(image) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if t.ndim == 2:
        t = t[None]
    elif t.ndim == 3 and t.shape[-1] in (1, 3) and t.shape[0] not in (1, 3):
        t = t.permute(2, 0, 1)
    return t[None].contiguous()


@torch.no_grad()
def extract_features(image, stream, backbone: Backbone) -> FeatureTensor:
    """Run one image (H x W, H x W x 3 or C x H x W, values in [-1, 1]) through a trunk."""
    was_training = backbone.training
    backbone.eval()
    out = backbone(_image_to_batch(image))[0]
    backbone.train(was_training)
    return FeatureTensor(out, Stream(stream))


class ZScore(nn.Module):
    """Per-channel standardization with frozen statistics."""

    def __init__(self, channels):
        super().__init__()
        self.register_buffer("mean", torch.zeros(channels))
        self.register_buffer("std", torch.ones(channels))
        self.register_buffer("fitted", torch.tensor(False))

    def set_stats(self, mean, std):
        self.mean.copy_(torch.as_tensor(mean))
        self.std.copy_(torch.as_tensor(std).clamp_min(STD_FLOOR))
        self.fitted.fill_(True)

    def forward(self, x):
        if not bool(self.fitted):
            raise RuntimeError("z-score statistics have not been fitted")
        return (x - self.mean[:, None, None]) / self.std[:, None, None]


def channel_stats(features: torch.Tensor):
    """Population mean and std per channel of an ``(n, C, H, W)`` batch."""
    flat = features.transpose(0, 1).reshape(features.shape[1], -1).double()
    return flat.mean(1), flat.std(1, correction=0).clamp_min(STD_FLOOR)


class ZScoreNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel z-scoring of ``(n, C, H, W)`` feature arrays."""

    def fit(self, X, y=None):
        mean, std = channel_stats(torch.as_tensor(np.asarray(X)))
        self.mean_, self.std_ = mean.numpy(), std.numpy()
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean_[:, None, None]) / self.std_[:, None, None]


def normalize_features(tensors, mode, stats=None):
    """Normalize each feature tensor independently.

    ``stats`` maps stream -> (mean, std) and is required for ZSCORE.  LAYER
    and LAYER_GROUP standardize each tensor over all of its elements (the
    learned affine of the trained model is not applied here).
    """
    mode = NormalizationMode(mode)
    out = []
    for t in tensors:
        v = t.values
        if mode is NormalizationMode.NONE:
            out.append(FeatureTensor(v, t.stream, t.normalized))
            continue
        if mode is NormalizationMode.ZSCORE:
            if not stats or t.stream not in stats:
                raise ValueError(f"z-score statistics missing for stream {t.stream.value}")
            mean, std = (torch.as_tensor(s, dtype=v.dtype) for s in stats[t.stream])
            v = (v - mean[:, None, None]) / std.clamp_min(STD_FLOOR)[:, None, None]
        else:
            v = F.layer_norm(v, v.shape, eps=LAYER_EPS)
        out.append(FeatureTensor(v, t.stream, True))
    return out


def fuse_features(tensors) -> torch.Tensor:
    """Concatenate feature tensors along the channel axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("nothing to fuse")
    values = [t.values if isinstance(t, FeatureTensor) else t for t in tensors]
    spatial = {tuple(v.shape[-2:]) for v in values}
    if len(spatial) != 1 or len({v.ndim for v in values}) != 1:
        raise ValueError(f"feature tensors disagree in shape: {[tuple(v.shape) for v in values]}")
    return torch.cat(values, dim=-3)


class RegressionHead(nn.Module):
    """flatten -> linear -> norm -> ReLU -> linear(1)."""

    def __init__(self, in_features, hidden=4096, group_norm=False):
        super().__init__()
        if group_norm and hidden % GROUP_SIZE:
            raise ValueError(f"hidden width must be a multiple of {GROUP_SIZE} for group norm")
        self.in_features = in_features
        self.fc1 = nn.Linear(in_features, hidden)
        self.norm = (nn.GroupNorm(hidden // GROUP_SIZE, hidden) if group_norm
                     else nn.LayerNorm(hidden))
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x):
        x = x.flatten(1)
        if x.shape[1] != self.in_features:
            raise ValueError(f"head expects {self.in_features} features, got {x.shape[1]}")
        return self.fc2(F.relu(self.norm(self.fc1(x))))[:, 0]


def regress_energy(fused, head: RegressionHead, output_scale: float = 300.0) -> float:
    """Estimated energy in kcal: the head's scaled output times ``output_scale``."""
    fused = torch.as_tensor(fused)
    with torch.no_grad():
        scaled = head(fused[None] if fused.ndim == 3 else fused)
    return float(scaled[0]) * output_scale


class FusionNet(nn.Module):
    def __init__(self, streams, normalization, reduced=False, hidden=4096,
                 weights_path=None, auto_resize=True):
        super().__init__()
        self.streams = ordered_streams(streams)
        self.normalization = NormalizationMode(normalization)
        self.backbones = nn.ModuleDict({
            s.value: Backbone(reduced, weights_path, auto_resize) for s in self.streams})
        channels = next(iter(self.backbones.values())).out_channels
        shape = (channels, FEATURE_GRID, FEATURE_GRID)
        norms = {}
        for s in self.streams:
            if self.normalization is NormalizationMode.ZSCORE:
                norms[s.value] = ZScore(channels)
            elif self.normalization in (NormalizationMode.LAYER, NormalizationMode.LAYER_GROUP):
                norms[s.value] = nn.LayerNorm(shape, eps=LAYER_EPS)
            else:
                norms[s.value] = nn.Identity()
        self.norms = nn.ModuleDict(norms)
        self.head = RegressionHead(channels * FEATURE_GRID ** 2 * len(self.streams), hidden,
                                   group_norm=self.normalization is NormalizationMode.LAYER_GROUP)

    def split_channels(self, x):
        parts, start = {}, 0
        for s in self.streams:
            parts[s] = x[:, start:start + s.channels]
            start += s.channels
        if start != x.shape[1]:
            raise ValueError(f"expected {start} input channels for streams "
                             f"{[s.value for s in self.streams]}, got {x.shape[1]}")
        return parts

    def features(self, x, normalize=True):
        parts = self.split_channels(x)
        feats = []
        for s in self.streams:
            f = self.backbones[s.value](parts[s])
            feats.append(self.norms[s.value](f) if normalize else f)
        return feats

    def forward(self, x):
        return self.head(fuse_features(self.features(x)))


def stack_streams(inputs: dict, streams) -> np.ndarray:
    """Stack per-stream arrays into one ``(n, C, H, W)`` input.

    RGB arrays are ``(n, H, W, 3)``, single-channel arrays ``(n, H, W)``; all
    values in [-1, 1].
    """
    blocks = []
    for s in ordered_streams(streams):
        a = np.asarray(inputs[s], dtype=np.float32)
        blocks.append(a.transpose(0, 3, 1, 2) if s is Stream.RGB else a[:, None])
    sides = {b.shape[-2:] for b in blocks}
    if len(sides) != 1:
        raise ValueError(f"streams have different image sizes: {sides}")
    return np.concatenate(blocks, axis=1)


class EnergyRegressor(RegressorMixin, BaseEstimator):
    """Multi-stream energy regressor trained end to end.

    ``X`` is ``(n, C, H, W)``: the active streams stacked along channels in
    the fixed order RGB (3 channels), density (1), depth (1), every value in
    [-1, 1] (see :func:`stack_streams`).  ``y`` is energy in kcal.  The
    network regresses ``y / output_scale`` under an L1-plus-squared-error
    loss with Adam and a step-decayed learning rate; ``predict`` returns
    kcal.
    """

    def __init__(self, streams=("density", "depth"), normalization="layer_group",
                 reduced_backbone=False, hidden_units=4096, output_scale=300.0,
                 initial_lr=5e-5, lr_decay=0.8, decay_every_epochs=10, epochs=50,
                 batch_size=8, seed=0, weights_path=None, auto_resize=True):
        self.streams = streams
        self.normalization = normalization
        self.reduced_backbone = reduced_backbone
        self.hidden_units = hidden_units
        self.output_scale = output_scale
        self.initial_lr = initial_lr
        self.lr_decay = lr_decay
        self.decay_every_epochs = decay_every_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.weights_path = weights_path
        self.auto_resize = auto_resize

    @property
    def training_config(self) -> TrainingConfig:
        return TrainingConfig(self.initial_lr, self.lr_decay, self.decay_every_epochs,
                              self.epochs, self.output_scale, self.seed, self.batch_size)

    @property
    def ablation(self) -> AblationConfig:
        return AblationConfig(tuple(self.streams), self.normalization)

    def _build(self) -> FusionNet:
        torch.manual_seed(self.seed)
        return FusionNet(self.streams, self.normalization, self.reduced_backbone,
                         self.hidden_units, self.weights_path, self.auto_resize)

    @staticmethod
    def _as_tensor(X) -> torch.Tensor:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 4:
            raise ValueError("X must be shaped (n, C, H, W)")
        if not np.isfinite(X).all():
            raise ValueError("X contains non-finite values")
        return torch.from_numpy(np.ascontiguousarray(X))

    @torch.no_grad()
    def _fit_zscore(self, net: FusionNet, x: torch.Tensor):
        net.eval()
        feats = [net.features(x[i:i + 32], normalize=False) for i in range(0, len(x), 32)]
        for k, s in enumerate(net.streams):
            mean, std = channel_stats(torch.cat([f[k] for f in feats]))
            net.norms[s.value].set_stats(mean.float(), std.float())

    def fit(self, X, y):
        config = self.training_config
        x = self._as_tensor(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(y) != len(x):
            raise ValueError("X and y have different lengths")
        target = torch.from_numpy(y / config.output_scale).float()
        net = self._build()
        if net.normalization is NormalizationMode.ZSCORE:
            self._fit_zscore(net, x)
        optimizer = torch.optim.Adam(net.parameters(), lr=config.initial_lr)
        order_rng = torch.Generator().manual_seed(self.seed)

        self.loss_history_ = []
        n = len(x)
        for epoch in range(1, self.epochs + 1):
            lr = lr_at_epoch(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            net.train()
            total = 0.0
            perm = torch.randperm(n, generator=order_rng)
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                optimizer.zero_grad()
                loss = compute_loss(net(x[idx]), target[idx])
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
            self.loss_history_.append({"epoch": epoch, "lr": lr, "train_loss": total / n})
            logger.info("epoch %d lr %.3g loss %.5f", epoch, lr, total / n)
        self.model_ = net.eval()
        self.n_features_in_ = x.shape[1]
        return self

    @torch.no_grad()
    def predict_scaled(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        x = self._as_tensor(X)
        self.model_.eval()
        out = [self.model_(x[i:i + 32]) for i in range(0, len(x), 32)]
        return torch.cat(out).double().numpy() if out else np.zeros(0)

    def predict(self, X) -> np.ndarray:
        return self.predict_scaled(X) * self.output_scale

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        torch.save({"params": self.get_params(), "label": self.ablation.label,
                    "state_dict": self.model_.state_dict(),
                    "loss_history": self.loss_history_,
                    "n_features_in": self.n_features_in_}, path)

    @classmethod
    def load(cls, path) -> "EnergyRegressor":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        params = dict(blob["params"])
        params["weights_path"] = None  # weights come from the state dict
        model = cls(**params)
        net = model._build()
        net.load_state_dict(blob["state_dict"])
        model.model_ = net.eval()
        model.loss_history_ = blob["loss_history"]
        model.n_features_in_ = blob["n_features_in"]
        model.weights_path = blob["params"]["weights_path"]
        return model
