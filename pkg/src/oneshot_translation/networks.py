"""Factorized encoders/decoders and discriminators.

Each domain's encoder is an unshared front half followed by a shared core;
each decoder mirrors this. The shared core objects are physically shared
between the two paths. Forward passes can run the shared (or discriminator)
parameters as detached constants: values are unchanged, but no gradient ever
reaches those parameters.
"""

from __future__ import annotations

import io
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import torch
import torch.nn as nn

from .data import ImageBatch
from .errors import DataError

CHECKPOINT_FORMAT_VERSION = 1

# parameter partition classes
SHARED = "shared"
UNSHARED_A = "unshared_a"
UNSHARED_B = "unshared_b"
DISCRIMINATOR = "discriminator"
PARTITION_CLASSES = (SHARED, UNSHARED_A, UNSHARED_B, DISCRIMINATOR)


@dataclass
class NetSpec:
    resolution: int = 32
    unshared_downsample_layers: int = 1
    shared_residual_blocks: int = 2
    base_channels: int = 64
    latent_channels: int = 128

    def __post_init__(self) -> None:
        if self.resolution not in (32, 256):
            raise ValueError(f"unsupported resolution {self.resolution}")
        if not 1 <= self.unshared_downsample_layers <= 2:
            raise ValueError("unshared_downsample_layers must be in [1, 2]")
        if not 1 <= self.shared_residual_blocks <= 3:
            raise ValueError("shared_residual_blocks must be in [1, 3]")
        if self.base_channels <= 0 or self.latent_channels <= 0:
            raise ValueError("channel counts must be positive")

    @classmethod
    def for_resolution(cls, resolution: int) -> "NetSpec":
        if resolution == 32:
            return cls(32, unshared_downsample_layers=1,
                       shared_residual_blocks=2,
                       base_channels=64, latent_channels=128)
        return cls(256, unshared_downsample_layers=2,
                   shared_residual_blocks=3,
                   base_channels=64, latent_channels=256)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class UnsharedEncoder(nn.Module):
    """Initial conv plus stride-2 downsampling convs up to the latent width."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        layers = [nn.Conv2d(3, spec.base_channels, 7, 1, 3),
                  nn.BatchNorm2d(spec.base_channels),
                  nn.ReLU(inplace=True)]
        ch = spec.base_channels
        for i in range(spec.unshared_downsample_layers):
            out_ch = (spec.latent_channels
                      if i == spec.unshared_downsample_layers - 1 else ch * 2)
            layers += [nn.Conv2d(ch, out_ch, 3, 2, 1),
                       nn.BatchNorm2d(out_ch),
                       nn.ReLU(inplace=True)]
            ch = out_ch
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class SharedEncoder(nn.Module):
    """Residual blocks ending in a linear conv producing the latent mean map."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        blocks = [ResidualBlock(spec.latent_channels)
                  for _ in range(spec.shared_residual_blocks)]
        self.body = nn.Sequential(*blocks)
        self.head = nn.Conv2d(spec.latent_channels, spec.latent_channels, 3, 1, 1)

    def forward(self, x):
        return self.head(self.body(x))


class SharedDecoder(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        layers = [nn.Conv2d(spec.latent_channels, spec.latent_channels, 3, 1, 1),
                  nn.BatchNorm2d(spec.latent_channels),
                  nn.ReLU(inplace=True)]
        layers += [ResidualBlock(spec.latent_channels)
                   for _ in range(spec.shared_residual_blocks)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class UnsharedDecoder(nn.Module):
    """Mirrors the unshared encoder: stride-2 upsampling then a tanh head."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        layers: list[nn.Module] = []
        ch = spec.latent_channels
        for i in range(spec.unshared_downsample_layers):
            out_ch = (spec.base_channels
                      if i == spec.unshared_downsample_layers - 1 else ch // 2)
            layers += [nn.ConvTranspose2d(ch, out_ch, 3, 2, 1, output_padding=1),
                       nn.BatchNorm2d(out_ch),
                       nn.ReLU(inplace=True)]
            ch = out_ch
        layers += [nn.Conv2d(ch, 3, 7, 1, 3), nn.Tanh()]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


# (kernel, stride) per conv layer of the patch discriminator; the final
# layer maps to one score channel per overlapping patch.
PATCH_DISC_LAYERS = [(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)]


def receptive_field(layers: list[tuple[int, int]]) -> int:
    """Receptive field of one output unit of a stack of (kernel, stride) convs."""
    rf = 1
    for kernel, stride in reversed(layers):
        rf = (rf - 1) * stride + kernel
    return rf


class PatchDiscriminator(nn.Module):
    """Scores overlapping patches of the image (one score per patch)."""

    def __init__(self, base_channels: int = 64):
        super().__init__()
        ch = base_channels
        layers = [nn.Conv2d(3, ch, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
        for kernel, stride in PATCH_DISC_LAYERS[1:-1]:
            layers += [nn.Conv2d(ch, ch * 2, kernel, stride, 1),
                       nn.BatchNorm2d(ch * 2),
                       nn.LeakyReLU(0.2, inplace=True)]
            ch *= 2
        layers += [nn.Conv2d(ch, 1, 4, 1, 1)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class FullImageDiscriminator(nn.Module):
    """DCGAN-style whole-image critic for 32x32 inputs; output (N, 1)."""

    def __init__(self, base_channels: int = 64):
        super().__init__()
        ch = base_channels
        self.body = nn.Sequential(
            nn.Conv2d(3, ch, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ch, ch * 2, 4, 2, 1),
            nn.BatchNorm2d(ch * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ch * 2, ch * 4, 4, 2, 1),
            nn.BatchNorm2d(ch * 4),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ch * 4, 1, 4, 1, 0),
        )

    def forward(self, x):
        return self.body(x).flatten(1)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


def _module_forward(module: nn.Module, x: torch.Tensor, detach_params: bool,
                    update_stats: bool) -> torch.Tensor:
    """Run a module, optionally treating its parameters as constants.

    detach_params keeps gradients flowing through the input while blocking
    them at the parameters; update_stats=False discards any batch-norm
    running-statistic updates this call would make.
    """
    if not detach_params and update_stats:
        return module(x)
    params = {name: (p.detach() if detach_params else p)
              for name, p in module.named_parameters()}
    buffers = {name: (b.detach().clone() if not update_stats else b)
               for name, b in module.named_buffers()}
    return torch.func.functional_call(module, {**params, **buffers}, (x,))


def _as_pixels(batch) -> torch.Tensor:
    return batch.pixels if isinstance(batch, ImageBatch) else batch


class SharedDualAutoencoder(nn.Module):
    """The six-network bundle plus the domain-B discriminator.

    enc_shared and dec_shared are single objects used by both paths, so the
    A/B factorizations hold by construction and any update through one path
    is visible to the other.
    """

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        self.enc_a_unshared = UnsharedEncoder(spec)
        self.enc_b_unshared = UnsharedEncoder(spec)
        self.enc_shared = SharedEncoder(spec)
        self.dec_shared = SharedDecoder(spec)
        self.dec_a_unshared = UnsharedDecoder(spec)
        self.dec_b_unshared = UnsharedDecoder(spec)
        if spec.resolution == 256:
            self.discriminator: nn.Module = PatchDiscriminator(spec.base_channels)
        else:
            self.discriminator = FullImageDiscriminator(spec.base_channels)

    def partition(self) -> Dict[str, str]:
        """Total map from every trainable parameter name to its class."""
        out: Dict[str, str] = {}
        for name, _ in self.named_parameters():
            if name.startswith(("enc_shared", "dec_shared")):
                out[name] = SHARED
            elif name.startswith(("enc_a_unshared", "dec_a_unshared")):
                out[name] = UNSHARED_A
            elif name.startswith(("enc_b_unshared", "dec_b_unshared")):
                out[name] = UNSHARED_B
            elif name.startswith("discriminator"):
                out[name] = DISCRIMINATOR
            else:
                raise AssertionError(f"unclassified parameter {name}")
        return out

    def parameters_in(self, *classes: str):
        partition = self.partition()
        params = dict(self.named_parameters())
        return [params[name] for name, cls in partition.items()
                if cls in classes]

    def _check_resolution(self, x: torch.Tensor) -> None:
        if x.shape[2] != self.spec.resolution:
            raise ValueError(f"input resolution {x.shape[2]} does not match "
                             f"bundle resolution {self.spec.resolution}")

    def encode(self, batch, side: str, detach_shared: bool = False,
               update_stats: bool = True) -> torch.Tensor:
        """Unshared encoder for `side` followed by the shared encoder.

        Encoding an image with the other side's encoder is legitimate (the
        cross-domain compositions rely on it); only a resolution mismatch
        is an error. Returns the latent mean map.
        """
        x = _as_pixels(batch)
        self._check_resolution(x)
        front = self.enc_a_unshared if side == "A" else self.enc_b_unshared
        h = _module_forward(front, x, False, update_stats)
        return _module_forward(self.enc_shared, h, detach_shared, update_stats)

    def decode(self, code: torch.Tensor, side: str, detach_shared: bool = False,
               update_stats: bool = True) -> torch.Tensor:
        """Shared decoder followed by the unshared decoder for `side`."""
        h = _module_forward(self.dec_shared, code, detach_shared, update_stats)
        back = self.dec_a_unshared if side == "A" else self.dec_b_unshared
        return _module_forward(back, h, False, update_stats)

    def discriminate(self, batch, detach: bool = False,
                     update_stats: bool = True) -> torch.Tensor:
        x = _as_pixels(batch)
        self._check_resolution(x)
        return _module_forward(self.discriminator, x, detach, update_stats)

    def autoencode(self, batch, side: str, noise: Optional[torch.Tensor] = None,
                   detach_shared: bool = False,
                   update_stats: bool = True) -> torch.Tensor:
        code = self.encode(batch, side, detach_shared, update_stats)
        if noise is not None:
            code = code + noise
        return self.decode(code, side, detach_shared, update_stats)


def build(spec: NetSpec, seed: int = 0) -> SharedDualAutoencoder:
    """Construct a bundle with seeded Gaussian(0, 0.02) initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        bundle = SharedDualAutoencoder(spec)
        bundle.apply(_init_weights)
    return bundle


def bundle_payload(bundle: SharedDualAutoencoder) -> dict:
    """Serializable container: spec, partition-qualified parameters, buffers."""
    partition = bundle.partition()
    params = {f"{partition[name]}:{name}": tensor
              for name, tensor in bundle.state_dict().items()
              if name in partition}
    buffers = {name: tensor for name, tensor in bundle.state_dict().items()
               if name not in partition}
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "net_spec": asdict(bundle.spec),
        "parameters": params,
        "buffers": buffers,
    }


def bundle_from_payload(payload: dict) -> SharedDualAutoencoder:
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"incompatible checkpoint format version {version!r} "
                        f"(expected {CHECKPOINT_FORMAT_VERSION})")
    bundle = SharedDualAutoencoder(NetSpec(**payload["net_spec"]))
    state = {name.split(":", 1)[1]: tensor
             for name, tensor in payload["parameters"].items()}
    state.update(payload["buffers"])
    bundle.load_state_dict(state)
    return bundle


def save_bundle(bundle: SharedDualAutoencoder, path: Path | str) -> None:
    torch.save(bundle_payload(bundle), str(path))


def load_bundle(path: Path | str) -> SharedDualAutoencoder:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(str(path), weights_only=False)
    except (RuntimeError, EOFError, io.UnsupportedOperation,
            pickle.UnpicklingError) as exc:
        raise DataError(f"corrupt checkpoint file: {path} ({exc})") from exc
    if not isinstance(payload, dict):
        raise DataError(f"corrupt checkpoint file: {path} (not a payload dict)")
    return bundle_from_payload(payload)
