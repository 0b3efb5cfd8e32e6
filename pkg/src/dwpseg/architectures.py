"""3D U-Net with ResNet-like blocks and the kernel VAE used as a weight prior.

The U-Net follows a fixed block list::

    init_conv -> down1 .. down6 -> up1 .. up3 -> out

``down1/3/5`` halve the resolution (stride-2 first conv plus a strided
projection shortcut), ``down2/4/6`` are identity-shortcut residual blocks.
Each up block projects channels, upsamples trilinearly by 2, adds the
encoder output of the same resolution and runs a residual pair of convs.
Every conv is preceded by instance norm and ReLU except ``init_conv`` and
``out``.

Weights are either point tensors (deterministic mode) or a
:class:`~dwpseg.variational.GaussianPosterior` per layer (variational mode).
Any forward call may override them with an explicit ``{layer_id: tensor}``
mapping, which is how sampled weights are fed in.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from dwpseg.container import read_container, write_container
from dwpseg.errors import ModeError, SpecError
from dwpseg.variational import GaussianPosterior

DETERMINISTIC = "deterministic"
VARIATIONAL = "variational"

FULL_WIDTHS = (16, 32, 64)
TOY_WIDTHS = (4, 8, 16)
FULL_PARAMETER_COUNT = 726480
MIN_SPATIAL = 8
INSTANCE_NORM_EPS = 1e-5

CHECKPOINT_MAGIC = b"DWPN"
CHECKPOINT_VERSION = 1

# Layer id -> prior group at the full-width configuration (projection_kernel=1).
# Groups follow the resolution of the layer's input along the forward pass:
# 1..4 encoder at 1, 1/2, 1/4, 1/8; 5..7 decoder at 1/4, 1/2, 1.
FULL_GROUP_MAP = {
    "init_conv": 1,
    "down1.conv_1": 1,
    "down1.conv_2": 2,
    "down2.conv_1": 2,
    "down2.conv_2": 2,
    "down3.conv_1": 2,
    "down3.conv_2": 3,
    "down4.conv_1": 3,
    "down4.conv_2": 3,
    "down5.conv_1": 3,
    "down5.conv_2": 4,
    "down6.conv_1": 4,
    "down6.conv_2": 4,
    "up1.conv_1": 5,
    "up1.conv_2": 5,
    "up2.conv_1": 6,
    "up2.conv_2": 6,
    "up3.conv_1": 7,
    "up3.conv_2": 7,
}
N_GROUPS = 7

FIRST_BLOCK = ("init_conv", "down1")
LAST_BLOCK = ("up3", "out")


@dataclass
class NetworkSpec:
    in_channels: int = 1
    out_channels: int = 2
    base_widths: tuple = FULL_WIDTHS
    mode: str = DETERMINISTIC
    projection_kernel: int = 1

    def __post_init__(self):
        self.base_widths = tuple(int(w) for w in self.base_widths)
        if len(self.base_widths) != 3 or any(w < 1 for w in self.base_widths):
            raise SpecError(f"base_widths must be three positive counts, got {self.base_widths}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpecError("channel counts must be positive")
        if self.mode not in (DETERMINISTIC, VARIATIONAL):
            raise SpecError(f"unknown mode {self.mode!r}")
        if self.projection_kernel not in (1, 3):
            raise SpecError("projection_kernel must be 1 or 3")

    @classmethod
    def full(cls, **kw) -> "NetworkSpec":
        return cls(base_widths=FULL_WIDTHS, **kw)

    @classmethod
    def toy(cls, **kw) -> "NetworkSpec":
        return cls(base_widths=TOY_WIDTHS, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_widths"] = list(self.base_widths)
        return d


@dataclass(frozen=True)
class LayerInfo:
    layer_id: str
    c_in: int
    c_out: int
    kernel: int
    stride: int
    level: int  # input resolution is 1 / 2**level
    decoder: bool

    @property
    def shape(self) -> tuple:
        k = self.kernel
        return (self.c_out, self.c_in, k, k, k)

    @property
    def group(self) -> Optional[int]:
        if self.kernel != 3:
            return None
        if not self.decoder or self.level == 3:
            return self.level + 1
        return 7 - self.level


def layer_table(spec: NetworkSpec) -> list[LayerInfo]:
    """Every conv layer of the U-Net in forward order."""
    w1, w2, w3 = spec.base_widths
    pk = spec.projection_kernel
    L = LayerInfo
    return [
        L("init_conv", spec.in_channels, w1, 3, 1, 0, False),
        L("down1.conv_1", w1, w2, 3, 2, 0, False),
        L("down1.conv_2", w2, w2, 3, 1, 1, False),
        L("down1.down", w1, w2, pk, 2, 0, False),
        L("down2.conv_1", w2, w2, 3, 1, 1, False),
        L("down2.conv_2", w2, w2, 3, 1, 1, False),
        L("down3.conv_1", w2, w2, 3, 2, 1, False),
        L("down3.conv_2", w2, w2, 3, 1, 2, False),
        L("down3.down", w2, w2, pk, 2, 1, False),
        L("down4.conv_1", w2, w2, 3, 1, 2, False),
        L("down4.conv_2", w2, w2, 3, 1, 2, False),
        L("down5.conv_1", w2, w3, 3, 2, 2, False),
        L("down5.conv_2", w3, w3, 3, 1, 3, False),
        L("down5.down", w2, w3, pk, 2, 2, False),
        L("down6.conv_1", w3, w3, 3, 1, 3, False),
        L("down6.conv_2", w3, w3, 3, 1, 3, False),
        L("up1.upsample", w3, w2, pk, 1, 3, True),
        L("up1.conv_1", w2, w2, 3, 1, 2, True),
        L("up1.conv_2", w2, w2, 3, 1, 2, True),
        L("up2.upsample", w2, w2, pk, 1, 2, True),
        L("up2.conv_1", w2, w2, 3, 1, 1, True),
        L("up2.conv_2", w2, w2, 3, 1, 1, True),
        L("up3.upsample", w2, w1, pk, 1, 1, True),
        L("up3.conv_1", w1, w1, 3, 1, 0, True),
        L("up3.conv_2", w1, w1, 3, 1, 0, True),
        L("out", w1, spec.out_channels, 1, 1, 0, True),
    ]


def resolution_groups(spec: NetworkSpec) -> Dict[str, int]:
    """Map every 3x3x3 layer to its prior group (1..7)."""
    return {info.layer_id: info.group for info in layer_table(spec) if info.group is not None}


class KernelConv(nn.Module):
    """Bias-free 3D convolution whose kernel is a point estimate or a Gaussian posterior."""

    def __init__(self, info: LayerInfo, mode: str, dtype=None):
        super().__init__()
        self.info = info
        self.layer_id = info.layer_id
        self.mode = mode
        self.stride = info.stride
        self.padding = info.kernel // 2
        if mode == DETERMINISTIC:
            self.weight = nn.Parameter(torch.zeros(info.shape, dtype=dtype))
        else:
            self.posterior = GaussianPosterior(info.shape, dtype=dtype)

    def point_weight(self) -> Tensor:
        return self.weight if self.mode == DETERMINISTIC else self.posterior.mu

    def forward(self, x: Tensor, weights: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        w = None if weights is None else weights.get(self.layer_id)
        if w is None:
            w = self.point_weight()
        return F.conv3d(x, w, stride=self.stride, padding=self.padding)

    def extra_repr(self) -> str:
        i = self.info
        return f"{i.c_in}, {i.c_out}, kernel_size={i.kernel}, stride={i.stride}, mode={self.mode}"


class ConvBlock(nn.Module):
    """InstanceNorm3d -> ReLU -> conv."""

    def __init__(self, info: LayerInfo, mode: str, dtype=None):
        super().__init__()
        self.conv = KernelConv(info, mode, dtype)

    def forward(self, x, weights=None):
        x = F.instance_norm(x, eps=INSTANCE_NORM_EPS)
        return self.conv(F.relu(x), weights)


class DownBlock(nn.Module):
    def __init__(self, infos: Dict[str, LayerInfo], name: str, mode: str, dtype=None):
        super().__init__()
        self.conv_1 = ConvBlock(infos[f"{name}.conv_1"], mode, dtype)
        self.conv_2 = ConvBlock(infos[f"{name}.conv_2"], mode, dtype)
        self.down = ConvBlock(infos[f"{name}.down"], mode, dtype) if f"{name}.down" in infos else None

    def forward(self, x, weights=None):
        h = self.conv_2(self.conv_1(x, weights), weights)
        shortcut = x if self.down is None else self.down(x, weights)
        return h + shortcut


class UpBlock(nn.Module):
    def __init__(self, infos: Dict[str, LayerInfo], name: str, mode: str, dtype=None):
        super().__init__()
        self.upsample = ConvBlock(infos[f"{name}.upsample"], mode, dtype)
        self.conv_1 = ConvBlock(infos[f"{name}.conv_1"], mode, dtype)
        self.conv_2 = ConvBlock(infos[f"{name}.conv_2"], mode, dtype)

    def forward(self, x, skip, weights=None):
        u = F.interpolate(self.upsample(x, weights), scale_factor=2.0, mode="trilinear", align_corners=False)
        # odd sizes: the encoder rounded up, so the upsampled map can be one voxel larger
        d, h, w = skip.shape[2:]
        h0 = u[:, :, :d, :h, :w] + skip
        return h0 + self.conv_2(self.conv_1(h0, weights), weights)


class UNet3D(nn.Module):
    ENCODER = ("down1", "down2", "down3", "down4", "down5", "down6")
    DECODER = ("up1", "up2", "up3")
    # decoder block -> encoder output it consumes as skip connection
    SKIPS = {"up1": "down4", "up2": "down2", "up3": "init_conv"}

    def __init__(self, spec: NetworkSpec, dtype=None):
        super().__init__()
        self.spec = spec
        self.mode = spec.mode
        table = layer_table(spec)
        infos = {i.layer_id: i for i in table}
        self.init_conv = KernelConv(infos["init_conv"], spec.mode, dtype)
        for name in self.ENCODER:
            setattr(self, name, DownBlock(infos, name, spec.mode, dtype))
        for name in self.DECODER:
            setattr(self, name, UpBlock(infos, name, spec.mode, dtype))
        self.out = KernelConv(infos["out"], spec.mode, dtype)
        self.layers: Dict[str, KernelConv] = {
            m.layer_id: m for m in self.modules() if isinstance(m, KernelConv)
        }
        self.layers = {i.layer_id: self.layers[i.layer_id] for i in table}

    @property
    def dwp_layer_set(self) -> frozenset:
        return frozenset(lid for lid, conv in self.layers.items() if conv.info.kernel == 3)

    def features(self, x: Tensor, weights: Optional[Mapping[str, Tensor]] = None) -> Dict[str, Tensor]:
        """All block outputs keyed by block name (``init_conv``, ``down1``..., ``out``)."""
        feats = {"init_conv": self.init_conv(x, weights)}
        h = feats["init_conv"]
        for name in self.ENCODER:
            h = getattr(self, name)(h, weights)
            feats[name] = h
        for name in self.DECODER:
            h = getattr(self, name)(h, feats[self.SKIPS[name]], weights)
            feats[name] = h
        feats["out"] = self.out(h, weights)
        return feats

    def forward(self, x: Tensor, weights: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        check_volume_shape(x.shape[2:])
        return self.features(x, weights)["out"]

    def point_weights(self) -> Dict[str, Tensor]:
        return {lid: conv.point_weight() for lid, conv in self.layers.items()}

    def posteriors(self) -> Dict[str, GaussianPosterior]:
        if self.mode != VARIATIONAL:
            raise ModeError("posteriors exist only in variational mode")
        return {lid: conv.posterior for lid, conv in self.layers.items()}

    def sample_weights(self, generator: Optional[torch.Generator] = None, noise: Optional[Mapping[str, Tensor]] = None) -> Dict[str, Tensor]:
        """One reparametrised weight draw per layer (variational mode only)."""
        from dwpseg.variational import sample_weights

        out = {}
        for lid, post in self.posteriors().items():
            eps = None if noise is None else noise.get(lid)
            if eps is None:
                eps = torch.randn(post.shape, generator=generator, dtype=post.mu.dtype)
            out[lid] = sample_weights(post, eps)
        return out

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def check_volume_shape(spatial) -> None:
    if len(spatial) != 3:
        raise ValueError(f"expected three spatial axes, got {tuple(spatial)}")
    if min(spatial) < MIN_SPATIAL:
        raise ValueError(f"volume {tuple(spatial)} is smaller than {MIN_SPATIAL} along some axis")


def bottleneck_shape(spatial) -> tuple:
    """Spatial size after the three stride-2 stages: ceil(n / 8) per axis."""
    return tuple(math.ceil(math.ceil(math.ceil(n / 2) / 2) / 2) for n in spatial)


def he_init(net: UNet3D, generator: Optional[torch.Generator] = None) -> UNet3D:
    """Zero-mean Gaussian kernels with variance 2 / fan_in (means, in variational mode)."""
    with torch.no_grad():
        for conv in net.layers.values():
            w = conv.point_weight()
            fan_in = w.shape[1] * w[0, 0].numel()
            w.copy_(torch.randn(w.shape, generator=generator, dtype=w.dtype) * math.sqrt(2.0 / fan_in))
    return net


def build_unet(spec: NetworkSpec, generator: Optional[torch.Generator] = None, dtype=None) -> UNet3D:
    """Build the U-Net and He-initialise its (mean) kernels."""
    return he_init(UNet3D(spec, dtype=dtype), generator)


def forward(net: UNet3D, volume: Tensor, weights: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """Logits for a single ``[C, D, H, W]`` volume or a ``[B, C, D, H, W]`` batch."""
    if volume.dim() == 4:
        return net(volume.unsqueeze(0), weights)[0]
    return net(volume, weights)


def freeze_middle(net: UNet3D) -> UNet3D:
    """Leave only the first block (init_conv, down1) and last block (up3, out) trainable."""
    if net.mode != DETERMINISTIC:
        raise ModeError("freezing the middle is a deterministic-network baseline")
    keep = FIRST_BLOCK + LAST_BLOCK
    for lid, conv in net.layers.items():
        trainable = lid.split(".")[0] in keep
        for p in conv.parameters():
            p.requires_grad_(trainable)
    return net


def unfreeze(net: UNet3D) -> UNet3D:
    for p in net.parameters():
        p.requires_grad_(True)
    return net


def save_checkpoint(net: UNet3D, path, meta: Optional[dict] = None) -> None:
    arrays = {}
    for lid, conv in net.layers.items():
        if net.mode == DETERMINISTIC:
            arrays[f"{lid}/weight"] = conv.weight.detach().cpu().numpy()
        else:
            arrays[f"{lid}/mu"] = conv.posterior.mu.detach().cpu().numpy()
            arrays[f"{lid}/log_sigma"] = conv.posterior.log_sigma.detach().cpu().numpy()
    header = {"spec": net.spec.to_dict(), "mode": net.mode, "extra": meta or {}}
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, arrays)


def load_checkpoint(path, with_meta: bool = False):
    meta, arrays = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    spec = NetworkSpec(**meta["spec"])
    dtype = torch.from_numpy(next(iter(arrays.values()))).dtype if arrays else None
    net = UNet3D(spec, dtype=dtype)
    with torch.no_grad():
        for lid, conv in net.layers.items():
            if spec.mode == DETERMINISTIC:
                conv.weight.copy_(torch.from_numpy(arrays[f"{lid}/weight"]))
            else:
                conv.posterior.mu.copy_(torch.from_numpy(arrays[f"{lid}/mu"]))
                conv.posterior.log_sigma.copy_(torch.from_numpy(arrays[f"{lid}/log_sigma"]))
    return (net, meta.get("extra", {})) if with_meta else net


# --------------------------------------------------------------------------
# kernel VAE


@dataclass
class KernelVAESpec:
    latent_dim: int = 6
    kernel_size: int = 3
    log_sigma_range: tuple = (-4.0, 1.0)

    def __post_init__(self):
        if self.latent_dim < 1:
            raise SpecError("latent_dim must be >= 1")
        if self.kernel_size != 3:
            raise SpecError("the kernel VAE is defined for 3x3x3 kernels")
        lo, hi = self.log_sigma_range
        if not lo < hi:
            raise SpecError("log_sigma_range must be increasing")


LATENT_LOG_SIGMA_RANGE = (-10.0, 5.0)


class KernelVAE(nn.Module):
    """VAE over single-channel 3x3x3 kernels.

    Encoder parameters (``encoder``, ``latent_mu``, ``latent_logsigma``) are
    the ones adapted during target training; everything reached from
    ``decode`` is the generative part and stays fixed there.
    """

    def __init__(self, spec: Optional[KernelVAESpec] = None):
        super().__init__()
        spec = spec or KernelVAESpec()
        self.spec = spec
        self.latent_dim = spec.latent_dim
        self.encoder = nn.Sequential(
            nn.Conv3d(1, 32, 3, padding=1),
            nn.MaxPool3d(2, ceil_mode=True),
            nn.ELU(),
            nn.Conv3d(32, 64, 3, padding=1),
            nn.MaxPool3d(2, ceil_mode=True),
            nn.ELU(),
            nn.Conv3d(64, 128, 1),
            nn.ELU(),
            nn.Flatten(),
        )
        self.latent_mu = nn.Linear(128, spec.latent_dim)
        self.latent_logsigma = nn.Linear(128, spec.latent_dim)
        self.linear = nn.Linear(spec.latent_dim, 128)
        self.decoder = nn.Sequential(
            nn.Conv3d(128, 128, 3, padding=1),
            nn.ELU(),
            nn.ConvTranspose3d(128, 128, 3),
            nn.ELU(),
            nn.ConvTranspose3d(128, 64, 1),
            nn.ELU(),
            nn.ConvTranspose3d(64, 32, 1),
            nn.ELU(),
        )
        self.reconstruction_mu = nn.Sequential(nn.ConvTranspose3d(32, 1, 1), nn.Tanh())
        self.reconstruction_logsigma = nn.Sequential(nn.ConvTranspose3d(32, 1, 1), nn.Tanh())
        # start both heads at the centre of their Tanh range (mean 0, mid log-sigma); a random
        # start can saturate the log-sigma head at its upper bound, where training stalls
        for head in (self.reconstruction_mu, self.reconstruction_logsigma):
            nn.init.zeros_(head[0].weight)
            nn.init.zeros_(head[0].bias)

    def encoder_parameters(self):
        for m in (self.encoder, self.latent_mu, self.latent_logsigma):
            yield from m.parameters()

    def decoder_parameters(self):
        for m in (self.linear, self.decoder, self.reconstruction_mu, self.reconstruction_logsigma):
            yield from m.parameters()

    def encode(self, w: Tensor) -> tuple[Tensor, Tensor]:
        """``[n, 1, 3, 3, 3]`` kernels -> latent ``(mu_z, log_sigma_z)``, each ``[n, latent_dim]``."""
        if w.dim() != 5 or tuple(w.shape[1:]) != (1, 3, 3, 3):
            raise ValueError(f"expected kernels of shape [n, 1, 3, 3, 3], got {tuple(w.shape)}")
        h = self.encoder(w)
        return self.latent_mu(h), self.latent_logsigma(h).clamp(*LATENT_LOG_SIGMA_RANGE)

    def decode_heads(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Raw Tanh outputs of both reconstruction heads."""
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latents of shape [n, {self.latent_dim}], got {tuple(z.shape)}")
        h = self.decoder(self.linear(z).view(-1, 128, 1, 1, 1))
        return self.reconstruction_mu(h), self.reconstruction_logsigma(h)

    def decode(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Latents -> Gaussian kernel distribution ``(mu_w, log_sigma_w)``, each ``[n, 1, 3, 3, 3]``."""
        mu, raw = self.decode_heads(z)
        lo, hi = self.spec.log_sigma_range
        return mu, lo + (raw + 1.0) * (0.5 * (hi - lo))

    def sample(self, n: int, generator: Optional[torch.Generator] = None) -> Tensor:
        """Kernel means decoded from standard-normal latents."""
        p = next(self.parameters())
        z = torch.randn(n, self.latent_dim, generator=generator, dtype=p.dtype)
        with torch.no_grad():
            return self.decode(z)[0]


def build_kernel_vae(spec: Optional[KernelVAESpec] = None, generator: Optional[torch.Generator] = None) -> KernelVAE:
    if generator is None:
        return KernelVAE(spec)
    # module constructors draw from the global stream; fork it so the caller's seed decides
    seed = int(torch.randint(0, 2**62, (1,), generator=generator))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return KernelVAE(spec)


def vae_state_arrays(vae: KernelVAE, prefix: str = "") -> Dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().cpu().numpy() for k, v in vae.state_dict().items()}


def vae_from_arrays(arrays: Mapping[str, np.ndarray], spec: KernelVAESpec, prefix: str = "") -> KernelVAE:
    vae = KernelVAE(spec)
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}
    dtypes = {v.dtype for v in state.values()}
    if len(dtypes) == 1:
        vae.to(dtypes.pop())
    vae.load_state_dict(state)
    return vae
