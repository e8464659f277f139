"""Generator and discriminator networks.

Images are NCHW tensors in [-1, 1]. Discriminators return raw logits
``(adv_logit[N], cls_logits[N, cond_dim])``; :meth:`predict` applies the
sigmoids.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError

INIT_STD = 0.02


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Sub-pixel rearrangement (N, C*r*r, H, W) -> (N, C, H*r, W*r).

    out[n, c, h*r + i, w*r + j] == x[n, c*r*r + i*r + j, h, w]
    """
    n, c, h, w = x.shape
    if c % (r * r):
        raise ValidationError(f"{c} channels not divisible by r^2 = {r * r}")
    oc = c // (r * r)
    return x.reshape(n, oc, r, r, h, w).permute(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


class PixelShuffle(nn.Module):
    def __init__(self, r: int):
        super().__init__()
        self.r = r

    def forward(self, x):
        return pixel_shuffle(x, self.r)

    def extra_repr(self):
        return f"r={self.r}"


def _spec_from_dict(cls, doc):
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**doc)


@dataclass(frozen=True)
class GeneratorSpec:
    noise_dim: int = 128
    cond_dim: int = 34
    base_channels: int = 64
    base_spatial: int = 16
    n_resblocks: int = 16
    n_upscales: int = 3
    output_size: int = 128
    out_channels: int = 3
    final_kernel: int = 9

    def __post_init__(self):
        if self.base_spatial * 2 ** self.n_upscales != self.output_size:
            raise ConfigurationError(
                f"base_spatial * 2**n_upscales = {self.base_spatial * 2 ** self.n_upscales}, "
                f"but output_size = {self.output_size}"
            )
        if self.final_kernel % 2 == 0:
            raise ConfigurationError("final_kernel must be odd")


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_size: int = 128
    in_channels: int = 3
    base_channels: int = 32
    max_channels: int = 512
    n_resblocks: int = 10
    cond_dim: int = 34
    leaky_slope: float = 0.2
    use_batch_norm: bool = False

    def __post_init__(self):
        if self.use_batch_norm:
            raise ConfigurationError("the discriminator must not use batch normalization")
        if self.input_size < 8 or self.input_size & (self.input_size - 1):
            raise ConfigurationError("input_size must be a power of two >= 8")


@dataclass(frozen=True)
class DCGANSpec:
    """Transposed-convolution baseline generator, used for size/FID comparison."""

    noise_dim: int = 128
    cond_dim: int = 34
    base_channels: int = 64
    output_size: int = 128
    out_channels: int = 3

    def __post_init__(self):
        if self.output_size < 8 or self.output_size & (self.output_size - 1):
            raise ConfigurationError("output_size must be a power of two >= 8")


@dataclass(frozen=True)
class MLPSpec:
    """Small fully connected nets for low-dimensional toy data."""

    noise_dim: int = 2
    cond_dim: int = 0
    data_dim: int = 2
    hidden: int = 128
    depth: int = 3


class GenResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.BatchNorm2d(ch),
            nn.ReLU(),
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.BatchNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """SRResNet-style generator: dense projection, residual trunk, sub-pixel upscaling."""

    kind = "srresnet"

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        ch, s = spec.base_channels, spec.base_spatial
        self.project = nn.Linear(spec.noise_dim + spec.cond_dim, ch * s * s)
        self.project_bn = nn.BatchNorm2d(ch)
        self.trunk = nn.Sequential(*[GenResBlock(ch) for _ in range(spec.n_resblocks)])
        self.trunk_bn = nn.BatchNorm2d(ch)
        ups = []
        for _ in range(spec.n_upscales):
            ups += [nn.Conv2d(ch, ch * 4, 3, padding=1), PixelShuffle(2), nn.BatchNorm2d(ch), nn.ReLU()]
        self.upscale = nn.Sequential(*ups)
        k = spec.final_kernel
        self.to_rgb = nn.Conv2d(ch, spec.out_channels, k, padding=k // 2)

    def forward(self, z, c=None):
        h = z if c is None or c.shape[1] == 0 else torch.cat([z, c], dim=1)
        spec = self.spec
        h = self.project(h).view(-1, spec.base_channels, spec.base_spatial, spec.base_spatial)
        h = F.relu(self.project_bn(h))
        h = F.relu(h + self.trunk_bn(self.trunk(h)))
        return torch.tanh(self.to_rgb(self.upscale(h)))


class DCGANGenerator(nn.Module):
    kind = "dcgan"

    def __init__(self, spec: DCGANSpec):
        super().__init__()
        self.spec = spec
        n_up = int(math.log2(spec.output_size // 4))
        top = spec.base_channels * 2 ** (n_up - 1)
        self.top = top
        self.project = nn.Linear(spec.noise_dim + spec.cond_dim, top * 16)
        self.project_bn = nn.BatchNorm2d(top)
        layers = []
        ch = top
        for _ in range(n_up - 1):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1), nn.BatchNorm2d(ch // 2), nn.ReLU()]
            ch //= 2
        layers += [nn.ConvTranspose2d(ch, spec.out_channels, 4, 2, 1)]
        self.body = nn.Sequential(*layers)

    def forward(self, z, c=None):
        h = z if c is None or c.shape[1] == 0 else torch.cat([z, c], dim=1)
        h = F.relu(self.project_bn(self.project(h).view(-1, self.top, 4, 4)))
        return torch.tanh(self.body(h))


def _cls_logits(head: nn.Module | None, h: torch.Tensor) -> torch.Tensor:
    # unconditional discriminators carry no classifier head
    return h.new_zeros(h.shape[0], 0) if head is None else head(h)


class DiscResBlock(nn.Module):
    def __init__(self, ch, slope):
        super().__init__()
        self.slope = slope
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), self.slope)
        return F.leaky_relu(x + self.conv2(h), self.slope)


class Discriminator(nn.Module):
    """Residual discriminator with an adversarial head and a multi-label head.

    A stride-2 convolution follows every second residual block while the
    feature map is larger than 4x4. There is no batch normalization anywhere,
    so each example's outputs depend on that example alone.
    """

    kind = "resnet_d"

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        slope = spec.leaky_slope
        ch = spec.base_channels
        layers = [nn.Conv2d(spec.in_channels, ch, 4, 2, 1), nn.LeakyReLU(slope)]
        size = spec.input_size // 2
        for i in range(spec.n_resblocks):
            layers.append(DiscResBlock(ch, slope))
            if i % 2 == 1 and size > 4:
                out = min(ch * 2, spec.max_channels)
                layers += [nn.Conv2d(ch, out, 4, 2, 1), nn.LeakyReLU(slope)]
                ch, size = out, size // 2
        self.features = nn.Sequential(*layers)
        flat = ch * size * size
        self.adv_head = nn.Linear(flat, 1)
        self.cls_head = nn.Linear(flat, spec.cond_dim) if spec.cond_dim else None

    def forward(self, x):
        spec = self.spec
        expected = (spec.in_channels, spec.input_size, spec.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValidationError(f"discriminator expects (N, {expected}) input, got {tuple(x.shape)}")
        h = self.features(x).flatten(1)
        return self.adv_head(h).squeeze(1), _cls_logits(self.cls_head, h)

    def predict(self, x):
        adv, cls = self(x)
        return torch.sigmoid(adv), torch.sigmoid(cls)


class MLPGenerator(nn.Module):
    kind = "mlp_g"

    def __init__(self, spec: MLPSpec):
        super().__init__()
        self.spec = spec
        dims = [spec.noise_dim + spec.cond_dim] + [spec.hidden] * spec.depth
        layers = []
        for a, b in zip(dims, dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        layers.append(nn.Linear(dims[-1], spec.data_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, z, c=None):
        h = z if c is None or c.shape[1] == 0 else torch.cat([z, c], dim=1)
        return self.net(h)


class MLPDiscriminator(nn.Module):
    kind = "mlp_d"

    def __init__(self, spec: MLPSpec):
        super().__init__()
        self.spec = spec
        dims = [spec.data_dim] + [spec.hidden] * spec.depth
        layers = []
        for a, b in zip(dims, dims[1:]):
            layers += [nn.Linear(a, b), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.adv_head = nn.Linear(dims[-1], 1)
        self.cls_head = nn.Linear(dims[-1], spec.cond_dim) if spec.cond_dim else None

    def forward(self, x):
        h = self.features(x)
        return self.adv_head(h).squeeze(1), _cls_logits(self.cls_head, h)

    def predict(self, x):
        adv, cls = self(x)
        return torch.sigmoid(adv), torch.sigmoid(cls)


_REGISTRY = {
    "srresnet": (Generator, GeneratorSpec),
    "dcgan": (DCGANGenerator, DCGANSpec),
    "resnet_d": (Discriminator, DiscriminatorSpec),
    "mlp_g": (MLPGenerator, MLPSpec),
    "mlp_d": (MLPDiscriminator, MLPSpec),
}


def init_weights(network: nn.Module, rng_seed: int) -> nn.Module:
    """Draw every conv/dense weight from N(0, 0.02^2) and zero the biases."""
    gen = torch.Generator().manual_seed(int(rng_seed))
    with torch.no_grad():
        for module in network.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                w = torch.randn(module.weight.shape, generator=gen, dtype=torch.float64) * INIT_STD
                module.weight.copy_(w.to(module.weight.dtype))
                if module.bias is not None:
                    module.bias.zero_()
    return network


def build_generator(spec: GeneratorSpec | None = None, rng_seed: int | None = 0) -> Generator:
    net = Generator(spec or GeneratorSpec())
    return init_weights(net, rng_seed) if rng_seed is not None else net


def build_discriminator(spec: DiscriminatorSpec | None = None, rng_seed: int | None = 0) -> Discriminator:
    net = Discriminator(spec or DiscriminatorSpec())
    return init_weights(net, rng_seed) if rng_seed is not None else net


def architecture_manifest(network: nn.Module) -> dict:
    """Self-describing layer listing stored alongside every checkpoint."""
    layers = []
    for name, module in network.named_modules():
        if name and not list(module.children()):
            layers.append(
                {
                    "name": name,
                    "type": type(module).__name__,
                    "params": {k: list(p.shape) for k, p in module.named_parameters(recurse=False)},
                    "config": module.extra_repr(),
                }
            )
    return {
        "kind": network.kind,
        "spec": asdict(network.spec),
        "reconstruction": network.kind in ("srresnet", "resnet_d"),
        "n_parameters": sum(p.numel() for p in network.parameters()),
        "layers": layers,
    }


def build_from_manifest(manifest: dict) -> nn.Module:
    try:
        cls, spec_cls = _REGISTRY[manifest["kind"]]
    except KeyError:
        raise ConfigurationError(f"unknown network kind {manifest.get('kind')!r}") from None
    return cls(_spec_from_dict(spec_cls, manifest["spec"]))


def to_uint8_hwc(images: torch.Tensor) -> np.ndarray:
    """(N, C, H, W) in [-1, 1] -> (N, H, W, C) uint8."""
    arr = images.detach().cpu().clamp(-1, 1).permute(0, 2, 3, 1).numpy()
    return np.rint((arr + 1.0) * 127.5).astype(np.uint8)


def from_uint8_hwc(images: np.ndarray) -> torch.Tensor:
    arr = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    return arr.permute(0, 3, 1, 2) / 127.5 - 1.0
