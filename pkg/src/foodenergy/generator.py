"""RGB -> energy density map translation with a conditional GAN.

The generator is a U-Net (encoder/decoder with skip connections) ending in
``tanh`` so outputs live in [-1, 1], the signed representation of density
maps.  It is trained against a patch-level discriminator that sees the RGB
condition and a real or generated map, plus an L1 reconstruction term.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .density import EnergyDensityMap, Representation

logger = logging.getLogger(__name__)


@dataclass
class GanConfig:
    image_side: int = 256
    l1_weight: float = 100.0
    epochs: int = 200
    learning_rate: float = 2e-4
    seed: int = 0
    ngf: int = 64
    ndf: int = 64
    batch_size: int = 1
    beta1: float = 0.5
    dropout: float = 0.5

    def __post_init__(self):
        side = self.image_side
        if side < 64 or side & (side - 1):
            raise ValueError("image_side must be a power of two >= 64")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be >= 0")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class UNetBlock(nn.Module):
    """One encoder/decoder level wrapping an inner block, with a skip connection."""

    def __init__(self, outer_nc, inner_nc, in_nc=None, submodule=None,
                 outermost=False, innermost=False, dropout=0.0):
        super().__init__()
        self.outermost = outermost
        in_nc = outer_nc if in_nc is None else in_nc
        down_conv = nn.Conv2d(in_nc, inner_nc, 4, stride=2, padding=1, bias=True)
        if outermost:
            up_conv = nn.ConvTranspose2d(inner_nc * 2, outer_nc, 4, stride=2, padding=1)
            down = [down_conv]
            up = [nn.ReLU(True), up_conv, nn.Tanh()]
        elif innermost:
            up_conv = nn.ConvTranspose2d(inner_nc, outer_nc, 4, stride=2, padding=1)
            down = [nn.LeakyReLU(0.2, True), down_conv]
            up = [nn.ReLU(True), up_conv, nn.InstanceNorm2d(outer_nc)]
        else:
            up_conv = nn.ConvTranspose2d(inner_nc * 2, outer_nc, 4, stride=2, padding=1)
            down = [nn.LeakyReLU(0.2, True), down_conv, nn.InstanceNorm2d(inner_nc)]
            up = [nn.ReLU(True), up_conv, nn.InstanceNorm2d(outer_nc)]
            if dropout:
                up.append(nn.Dropout(dropout))
        layers = down + ([submodule] if submodule is not None else []) + up
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if self.outermost:
            return self.model(x)
        return torch.cat([x, self.model(x)], 1)


class UNetGenerator(nn.Module):
    def __init__(self, in_channels=3, out_channels=1, num_downs=7, ngf=64, dropout=0.5):
        super().__init__()
        if num_downs < 5:
            raise ValueError("num_downs must be >= 5")
        block = UNetBlock(ngf * 8, ngf * 8, innermost=True)
        for _ in range(num_downs - 5):
            block = UNetBlock(ngf * 8, ngf * 8, submodule=block, dropout=dropout)
        block = UNetBlock(ngf * 4, ngf * 8, submodule=block)
        block = UNetBlock(ngf * 2, ngf * 4, submodule=block)
        block = UNetBlock(ngf, ngf * 2, submodule=block)
        self.model = UNetBlock(out_channels, ngf, in_nc=in_channels, submodule=block,
                               outermost=True)

    def forward(self, x):
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """Scores overlapping patches of (condition, map) pairs as real or fake."""

    def __init__(self, in_channels=4, ndf=64, n_layers=3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers + 1):
            prev, mult = mult, min(2 ** n, 8)
            stride = 2 if n < n_layers else 1
            layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride=stride, padding=1),
                       nn.InstanceNorm2d(ndf * mult), nn.LeakyReLU(0.2, True)]
        layers.append(nn.Conv2d(ndf * mult, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def _init_weights(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def rgb_to_tensor(images, side=None, resize=False) -> torch.Tensor:
    """(n, H, W, 3) uint8 RGB -> (n, 3, H, W) float32 in [-1, 1]."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError("expected RGB images shaped (n, H, W, 3)")
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(0, 3, 1, 2)
    t = t / 127.5 - 1.0
    if side is not None and t.shape[-2:] != (side, side):
        if not resize:
            raise ValueError(f"images are {tuple(t.shape[-2:])}, generator expects "
                             f"{side}x{side}; pass resize=True to rescale")
        t = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)
    return t.contiguous()


class DensityMapGenerator(BaseEstimator):
    """Conditional GAN mapping RGB images to signed-unit energy density maps.

    ``fit(X, y)`` takes RGB images ``(n, S, S, 3)`` (uint8 scale) and target
    maps ``(n, S, S)`` in [-1, 1]; ``predict(X)`` returns ``(n, S, S)`` maps.
    After fitting, ``history_`` holds one dict per epoch with the mean
    discriminator loss, adversarial loss, L1 term (omitted when
    ``l1_weight == 0``) and the eval-mode training-set MAE.
    """

    def __init__(self, image_side=256, l1_weight=100.0, epochs=200, learning_rate=2e-4,
                 seed=0, ngf=64, ndf=64, batch_size=1, beta1=0.5, dropout=0.5):
        self.image_side = image_side
        self.l1_weight = l1_weight
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed
        self.ngf = ngf
        self.ndf = ndf
        self.batch_size = batch_size
        self.beta1 = beta1
        self.dropout = dropout

    @classmethod
    def from_config(cls, config: GanConfig):
        return cls(**asdict(config))

    @property
    def config(self) -> GanConfig:
        return GanConfig(**self.get_params())

    def _build(self):
        num_downs = int(math.log2(self.image_side)) - 1
        gen = UNetGenerator(3, 1, num_downs=num_downs, ngf=self.ngf, dropout=self.dropout)
        disc = PatchDiscriminator(4, ndf=self.ndf)
        gen.apply(_init_weights)
        disc.apply(_init_weights)
        return gen, disc

    def _check_xy(self, X, y):
        x = rgb_to_tensor(X, self.image_side)
        t = np.asarray(y, dtype=np.float32)
        if t.ndim == 4 and t.shape[-1] == 1:
            t = t[..., 0]
        if t.shape != (x.shape[0], self.image_side, self.image_side):
            raise ValueError(f"targets must be shaped (n, {self.image_side}, {self.image_side})")
        if np.abs(t).max(initial=0) > 1 + 1e-6:
            raise ValueError("target maps must be in the signed [-1, 1] representation")
        return x, torch.from_numpy(t).unsqueeze(1)

    def fit(self, X, y):
        self.config  # validates the hyperparameters
        x, target = self._check_xy(X, y)
        n = x.shape[0]
        if n < 2:
            raise ValueError("need at least 2 training pairs")
        torch.manual_seed(self.seed)
        gen, disc = self._build()
        opt_g = torch.optim.Adam(gen.parameters(), lr=self.learning_rate, betas=(self.beta1, 0.999))
        opt_d = torch.optim.Adam(disc.parameters(), lr=self.learning_rate, betas=(self.beta1, 0.999))
        order_rng = torch.Generator().manual_seed(self.seed)

        self.history_ = []
        for epoch in range(1, self.epochs + 1):
            gen.train()
            disc.train()
            sums = {"d_loss": 0.0, "g_gan": 0.0, "g_l1": 0.0}
            perm = torch.randperm(n, generator=order_rng)
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                real_a, real_b = x[idx], target[idx]
                fake_b = gen(real_a)

                opt_d.zero_grad()
                pred_fake = disc(torch.cat([real_a, fake_b.detach()], 1))
                pred_real = disc(torch.cat([real_a, real_b], 1))
                d_loss = 0.5 * (
                    F.binary_cross_entropy_with_logits(pred_fake, torch.zeros_like(pred_fake))
                    + F.binary_cross_entropy_with_logits(pred_real, torch.ones_like(pred_real)))
                d_loss.backward()
                opt_d.step()

                opt_g.zero_grad()
                pred_fake = disc(torch.cat([real_a, fake_b], 1))
                g_gan = F.binary_cross_entropy_with_logits(pred_fake, torch.ones_like(pred_fake))
                g_l1 = F.l1_loss(fake_b, real_b)
                g_loss = g_gan + self.l1_weight * g_l1 if self.l1_weight else g_gan
                g_loss.backward()
                opt_g.step()

                if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                    raise FloatingPointError(
                        f"non-finite GAN loss at epoch {epoch}: d={d_loss.item()} g={g_loss.item()}")
                k = len(idx)
                sums["d_loss"] += d_loss.item() * k
                sums["g_gan"] += g_gan.item() * k
                sums["g_l1"] += g_l1.item() * k

            row = {"epoch": epoch, "d_loss": sums["d_loss"] / n, "g_gan": sums["g_gan"] / n}
            if self.l1_weight:
                row["g_l1"] = sums["g_l1"] / n
            self.generator_ = gen
            row["train_mae"] = float(np.mean(np.abs(self._infer(x) - target.numpy()[:, 0])))
            self.history_.append(row)
            logger.info("gan epoch %d: %s", epoch, row)

        self.generator_ = gen
        self.discriminator_ = disc
        self.epochs_completed_ = self.epochs
        return self

    @torch.no_grad()
    def _infer(self, x: torch.Tensor) -> np.ndarray:
        gen = self.generator_
        was_training = gen.training
        gen.eval()
        outs = [gen(x[i:i + 16]) for i in range(0, x.shape[0], 16)]
        gen.train(was_training)
        out = torch.cat(outs).clamp_(-1.0, 1.0)
        return out[:, 0].numpy()

    def predict(self, X, resize=False) -> np.ndarray:
        check_is_fitted(self, "generator_")
        return self._infer(rgb_to_tensor(X, self.image_side, resize=resize))

    def transform(self, X):
        return self.predict(X)

    def save(self, path) -> None:
        check_is_fitted(self, "generator_")
        torch.save({
            "params": self.get_params(),
            "config_hash": self.config.digest(),
            "generator": self.generator_.state_dict(),
            "history": self.history_,
            "epochs_completed": self.epochs_completed_,
        }, path)

    @classmethod
    def load(cls, path) -> "DensityMapGenerator":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        model = cls(**blob["params"])
        if model.config.digest() != blob["config_hash"]:
            raise ValueError(f"{path}: config hash mismatch")
        gen, _ = model._build()
        gen.load_state_dict(blob["generator"])
        model.generator_ = gen.eval()
        model.history_ = blob["history"]
        model.epochs_completed_ = blob["epochs_completed"]
        return model


def train_density_generator(pairs, config: GanConfig):
    """Fit a generator on ``(rgb, signed density map)`` pairs; returns ``(model, history)``."""
    if not pairs:
        raise ValueError("no training pairs")
    X = np.stack([np.asarray(rgb) for rgb, _ in pairs])
    y = np.stack([m.values if isinstance(m, EnergyDensityMap) else np.asarray(m)
                  for _, m in pairs])
    model = DensityMapGenerator.from_config(config).fit(X, y)
    return model, model.history_


def generate_density_map(model: DensityMapGenerator, rgb, resize=False) -> EnergyDensityMap:
    values = model.predict(np.asarray(rgb)[None], resize=resize)[0]
    return EnergyDensityMap(values.astype(np.float64), Representation.SIGNED_UNIT)
