"""Encoder, transformation predictor, mask decoder and fixed semantic extractor.

These are small seeded convolutional stacks sized for 48x48 inputs on a CPU;
every module also runs at larger resolutions divisible by the encoder stride.
"""

import hashlib
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .correlation import as_channels, correlate
from .geometry import IDENTITY_AFFINE, TPS_GRID, Transform, invert_affine, warp


class Encoded(NamedTuple):
    features: Tensor
    skips: tuple


def _conv(cin, cout, bias=True):
    return nn.Conv2d(cin, cout, 3, padding=1, bias=bias)


class Encoder(nn.Module):
    """Strided feature encoder; each stage halves the resolution.

    ``forward`` returns the final ``(B, d, H/s, W/s)`` feature map together
    with the pre-pooling activations of every stage for skip connections.
    """

    def __init__(self, channels=(16, 32, 64), out_channels=64):
        super().__init__()
        self.channels = tuple(channels)
        stages = []
        cin = 3
        for cout in self.channels:
            stages.append(nn.Sequential(_conv(cin, cout), nn.ReLU(), _conv(cout, cout), nn.ReLU()))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(cin, out_channels, 1)
        self.out_channels = out_channels
        # He init with zero biases; the default init shrinks activations
        # with depth until the head bias dominates every position.
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    @property
    def stride(self):
        return 2 ** len(self.stages)

    def forward(self, images):
        h, w = images.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"image size {h}x{w} is not divisible by stride {self.stride}")
        skips = []
        x = images
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        return Encoded(self.head(x), tuple(skips))


class RegressionHead(nn.Module):
    """Conv stack over a correlation volume followed by a dense projection.

    The projection starts with zero weights and a bias equal to ``identity``,
    so a fresh head outputs the identity transform for any input.
    """

    def __init__(self, in_channels, spatial, identity, hidden=(32, 32)):
        super().__init__()
        layers = []
        cin = in_channels
        for cout in hidden:
            layers += [_conv(cin, cout), nn.ReLU()]
            cin = cout
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(cin * spatial[0] * spatial[1], len(identity))
        nn.init.zeros_(self.fc.weight)
        with torch.no_grad():
            self.fc.bias.copy_(torch.tensor(identity))

    def forward(self, corr):
        x = as_channels(corr)
        # CNNGeo-style normalization of the matching scores at each position.
        x = F.normalize(F.relu(x), dim=1)
        return self.fc(self.convs(x).flatten(1))


class TransformPredictor(nn.Module):
    """Affine stage followed by a TPS stage on the affinely aligned features."""

    def __init__(self, feature_hw, hidden=(32, 32)):
        super().__init__()
        h, w = feature_hw
        self.feature_hw = (h, w)
        self.affine_head = RegressionHead(h * w, (h, w), IDENTITY_AFFINE, hidden)
        self.tps_head = RegressionHead(h * w, (h, w), (0.0,) * (2 * TPS_GRID**2), hidden)

    def forward(self, f_a, f_b):
        affine = Transform("affine", affine=self.affine_head(correlate(f_a, f_b)))
        # Move f_a into B's frame: output point u reads f_a at affine^{-1}(u).
        aligned = warp(f_a, invert_affine(affine))
        tps = self.tps_head(correlate(aligned, f_b))
        return Transform("cascade", affine=affine.affine, tps=tps)


class Decoder(nn.Module):
    """Siamese upsampling decoder from features + correlation to a soft mask."""

    def __init__(self, in_channels, skip_channels, hidden=(32, 24, 16), upsample="nearest"):
        super().__init__()
        if upsample not in ("nearest", "deconv"):
            raise ValueError(f"unknown upsampling {upsample!r}")
        if len(hidden) != len(skip_channels):
            raise ValueError("one decoder block per encoder stage is required")
        self.upsample = upsample
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        cin = in_channels
        for cout, cskip in zip(hidden, reversed(tuple(skip_channels))):
            if upsample == "deconv":
                self.ups.append(nn.ConvTranspose2d(cin, cin, 2, stride=2))
            else:
                self.ups.append(nn.Identity())
            self.blocks.append(
                nn.Sequential(_conv(cin + cskip, cout), nn.ReLU(), _conv(cout, cout), nn.ReLU())
            )
            cin = cout
        self.out = nn.Conv2d(cin, 1, 1)

    def forward(self, features, corr, skips):
        x = torch.cat([features, as_channels(corr)], dim=1)
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = up(x) if self.upsample == "deconv" else F.interpolate(x, scale_factor=2.0, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        logits = self.out(x)[:, 0]
        # Soft clamp keeps the sigmoid strictly inside (0, 1) in float32.
        return torch.sigmoid(12.0 * torch.tanh(logits / 12.0))


def decode_masks(decoder, enc_a, enc_b, s_ab, s_ba):
    """Masks for both images; the two streams share ``decoder``."""
    if s_ab.shape[1:3] != enc_a.features.shape[-2:] or s_ba.shape[1:3] != enc_b.features.shape[-2:]:
        raise ValueError("correlation maps do not match the feature grids")
    m_a = decoder(enc_a.features, s_ab, enc_a.skips)
    m_b = decoder(enc_b.features, s_ba, enc_b.skips)
    return m_a, m_b


class SemanticExtractor(nn.Module):
    """Fixed random feature extractor used by the perceptual contrastive loss.

    Every filter and projection row sums to zero and there are no additive
    constants, so the stack ignores uniform grey offsets and black
    (masked-out) pixels contribute nothing.  With the default 1x1 kernels the
    pooled output describes colour composition only, so the artificial edge
    a mask cuts into an image carries no signal.  Pooled features ``u`` are mapped
    to ``sqrt(dim) * u / (|u| + kappa)``: unit-scale for ordinary images and
    shrinking to zero as the input fades to black.  ``kappa`` is
    ``kappa_rel`` times the response norm to a fixed noise image.
    """

    def __init__(self, dim=128, channels=(32, 64, 128), seed=0, kappa_rel=0.05, kernel_size=1):
        super().__init__()
        self.dim = dim
        self.kernel_size = k = kernel_size
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, cout in enumerate(channels):
            stride = 2 if i > 0 and k > 1 else 1
            conv = nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False)
            with torch.no_grad():
                w = torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * k * k)) ** 0.5
                conv.weight.copy_(w - w.mean(dim=(1, 2, 3), keepdim=True))
            layers += [conv, nn.ReLU()]
            cin = cout
        self.convs = nn.Sequential(*layers)
        self.proj = nn.Linear(cin, dim, bias=False)
        with torch.no_grad():
            w = torch.randn(self.proj.weight.shape, generator=gen) * cin**-0.5
            self.proj.weight.copy_(w - w.mean(dim=1, keepdim=True))
        for p in self.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            ref = self._pooled(torch.rand(1, 3, 48, 48, generator=gen)).norm()
        self.register_buffer("kappa", kappa_rel * ref)

    def train(self, mode=True):
        # Always behaves as a fixed function.
        return super().train(False)

    def _pooled(self, images):
        return self.proj(self.convs(images).mean(dim=(2, 3)))

    def _normalize(self, u):
        return u / (u.norm(dim=1, keepdim=True) + self.kappa.to(u.dtype)) * self.dim**0.5

    def forward(self, images):
        return self._normalize(self._pooled(images))

    def figure_ground(self, images, masks):
        """Features of ``masks * images`` and ``(1 - masks) * images``.

        With 1x1 kernels the stack is positively homogeneous per pixel, so
        ``relu``-features of ``m * x`` equal ``m`` times those of ``x``.  The
        per-pixel responses are then computed once and pooled under both
        weightings, which is exact for masks in ``[0, 1]``.
        """
        if self.kernel_size != 1:
            return self(masks.unsqueeze(1) * images), self((1 - masks).unsqueeze(1) * images)
        with torch.no_grad():
            z = self.convs(images)
        w = masks.unsqueeze(1).to(z.dtype)
        fg = self.proj((z * w).mean(dim=(2, 3)))
        bg = self.proj((z * (1 - w)).mean(dim=(2, 3)))
        return self._normalize(fg), self._normalize(bg)


def weights_digest(module):
    """SHA-256 over a module's parameters and buffers, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
