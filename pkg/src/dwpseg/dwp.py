"""Deep Weight Prior: VAE kernel priors and the approximate ELBO built on them.

A prior over 3x3x3 kernel slices is given only through a latent-variable
model ``p(w) = ∫ p_phi(w | z) p(z) dz``, so KL(q || p) has no closed form.
Per slice it is replaced by the single-sample upper-bound estimate ::

    log q(w) + log r_psi(z | w) - log p(z) - log p_phi(w | z),
    w ~ q(w),  z ~ r_psi(z | w)

whose expectation exceeds the true KL by E_q KL(r_psi(z|w) || p(z|w)).
The target network's posterior (theta) and the VAE encoders (psi) are
optimised jointly; decoders (phi) are left untouched.

Kernels are normalised per group before VAE training; network weights are
mapped with the same affine constants before being scored. The Jacobian
term of that map is a constant and is omitted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np
import torch
from torch import Tensor

from dwpseg.architectures import (
    KernelVAE,
    KernelVAESpec,
    VARIATIONAL,
    build_kernel_vae,
    vae_from_arrays,
    vae_state_arrays,
)
from dwpseg.container import read_container, write_container
from dwpseg.errors import FormatError, ModeError
from dwpseg.metrics import combined_per_sample, foreground_probs
from dwpseg.variational import GaussianPrior, clamp_log_sigma, log_q_elementwise

log = logging.getLogger(__name__)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

BUNDLE_MAGIC = b"DWPB"
BUNDLE_VERSION = 1


def _normal_logpdf(x: Tensor, mu: Tensor, log_sigma: Tensor) -> Tensor:
    z = (x - mu) * torch.exp(-log_sigma)
    return -log_sigma - _HALF_LOG_2PI - 0.5 * z * z


def _sum_event(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1).sum(dim=1)


def kl_approx_from_sample(w: Tensor, mu: Tensor, log_sigma: Tensor, vae, noise_z: Tensor,
                          shift: float = 0.0, scale: float = 1.0) -> Tensor:
    """Per-slice KL upper-bound estimate for an already drawn ``w`` (shape ``[n, ...]``)."""
    log_q = _sum_event(log_q_elementwise(mu, log_sigma, w))
    u = (w - shift) / scale
    mu_z, ls_z = vae.encode(u)
    if noise_z.shape != mu_z.shape:
        raise ValueError(f"noise_z shape {tuple(noise_z.shape)} != latent shape {tuple(mu_z.shape)}")
    z = mu_z + torch.exp(ls_z) * noise_z
    log_r = _sum_event(_normal_logpdf(z, mu_z, ls_z))
    log_pz = _sum_event(-_HALF_LOG_2PI - 0.5 * z * z)
    mu_u, ls_u = vae.decode(z)
    log_pw = _sum_event(_normal_logpdf(u, mu_u, ls_u))
    return log_q + log_r - log_pz - log_pw


def kl_approx(mu: Tensor, log_sigma: Tensor, vae, noise_w: Tensor, noise_z: Tensor,
              shift: float = 0.0, scale: float = 1.0) -> Tensor:
    """Vectorised estimate over a batch of slices; returns one value per slice."""
    if noise_w.shape != mu.shape or log_sigma.shape != mu.shape:
        raise ValueError(f"posterior/noise shapes differ: {tuple(mu.shape)}, {tuple(log_sigma.shape)}, {tuple(noise_w.shape)}")
    w = mu + clamp_log_sigma(log_sigma).exp() * noise_w
    return kl_approx_from_sample(w, mu, log_sigma, vae, noise_z, shift, scale)


def kl_approx_slice(post_slice, vae, noise_w: Tensor, noise_z: Tensor, shift: float = 0.0, scale: float = 1.0) -> Tensor:
    """Single-slice estimate. ``post_slice`` is ``(mu, log_sigma)`` of shape ``[1, 3, 3, 3]``."""
    mu, log_sigma = post_slice
    if noise_w.shape != mu.shape:
        raise ValueError(f"noise_w shape {tuple(noise_w.shape)} != slice shape {tuple(mu.shape)}")
    return kl_approx(mu[None], log_sigma[None], vae, noise_w[None], noise_z[None], shift, scale)[0]


@dataclass
class PriorBundle:
    """Per-group kernel VAEs plus the layer -> group table and normalisation constants.

    Layers absent from ``group_map`` (1x1x1 convs) are scored against ``fallback``.
    """

    vaes: Dict[int, KernelVAE]
    group_map: Dict[str, int]
    norm_constants: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    fallback: GaussianPrior = field(default_factory=GaussianPrior)

    def __post_init__(self):
        missing = sorted({g for g in self.group_map.values()} - set(self.vaes))
        if missing:
            raise ValueError(f"group map references groups without a VAE: {missing}")

    def vae_for(self, layer_id: str) -> Optional[Tuple[KernelVAE, float, float]]:
        g = self.group_map.get(layer_id)
        if g is None:
            return None
        shift, scale = self.norm_constants.get(g, (0.0, 1.0))
        return self.vaes[g], shift, scale

    def encoder_parameters(self):
        for g in sorted(self.vaes):
            yield from self.vaes[g].encoder_parameters()

    def decoder_parameters(self):
        for g in sorted(self.vaes):
            yield from self.vaes[g].decoder_parameters()

    def freeze_decoders(self) -> "PriorBundle":
        for p in self.decoder_parameters():
            p.requires_grad_(False)
        return self

    def to(self, dtype) -> "PriorBundle":
        for vae in self.vaes.values():
            vae.to(dtype)
        return self


def save_bundle(bundle: PriorBundle, path, meta: Optional[dict] = None) -> None:
    arrays = {}
    specs = {}
    for g, vae in bundle.vaes.items():
        arrays.update(vae_state_arrays(vae, prefix=f"vae{g}/"))
        specs[str(g)] = {"latent_dim": vae.spec.latent_dim, "log_sigma_range": list(vae.spec.log_sigma_range)}
    header = {
        "groups": sorted(int(g) for g in bundle.vaes),
        "vae_specs": specs,
        "group_map": dict(bundle.group_map),
        "norm_constants": {str(g): list(c) for g, c in bundle.norm_constants.items()},
        "fallback": [float(torch.as_tensor(bundle.fallback.mu0)), float(torch.as_tensor(bundle.fallback.sigma0))],
        "extra": meta or {},
    }
    write_container(path, BUNDLE_MAGIC, BUNDLE_VERSION, header, arrays)


def load_bundle(path) -> PriorBundle:
    meta, arrays = read_container(path, BUNDLE_MAGIC, BUNDLE_VERSION)
    try:
        vaes = {}
        for g in meta["groups"]:
            s = meta["vae_specs"][str(g)]
            spec = KernelVAESpec(latent_dim=int(s["latent_dim"]), log_sigma_range=tuple(s["log_sigma_range"]))
            vaes[int(g)] = vae_from_arrays(arrays, spec, prefix=f"vae{g}/")
        consts = {int(g): tuple(c) for g, c in meta["norm_constants"].items()}
        mu0, sigma0 = meta["fallback"]
        bundle = PriorBundle(vaes, {k: int(v) for k, v in meta["group_map"].items()}, consts, GaussianPrior(mu0, sigma0))
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise FormatError(f"{path}: malformed prior bundle ({exc})") from exc
    return bundle


# --------------------------------------------------------------------------
# approximate ELBO


@dataclass
class ElboParts:
    objective: Tensor
    data_term: Tensor
    kl_term: Tensor
    kl_dwp: Tensor
    kl_fallback: Tensor
    weights: Dict[str, Tensor]


def elbo_approx(net, bundle: Optional[PriorBundle], images: Tensor, masks: Tensor, dataset_size: int,
                generator: Optional[torch.Generator] = None, noise: Optional[Mapping[str, Mapping[str, Tensor]]] = None,
                kl_weight: float = 1.0) -> ElboParts:
    """Single-sample approximate ELBO on one minibatch.

    data term: ``-(N / M) * sum_batch(0.99 * dice_i + 0.01 * ce_i)``, the
    segmentation loss read as a negative log-likelihood; KL term: the
    per-slice upper bound for layers covered by ``bundle`` and the sampled
    ``log q(w) - log p(w)`` against the fallback Gaussian otherwise.
    ``bundle=None`` puts every layer on the N(0, 1) fallback.

    ``noise`` may fix the draws: ``{"w": {layer_id: eps}, "z": {layer_id: eps_z}}``
    with ``eps_z`` of shape ``[n_slices, latent_dim]``.
    """
    if net.mode != VARIATIONAL:
        raise ModeError("the approximate ELBO needs a variational network")
    m = int(images.shape[0])
    if m == 0:
        raise ValueError("empty batch")
    if dataset_size < m:
        raise ValueError(f"dataset size {dataset_size} < batch size {m}")
    noise = noise or {}
    weights = net.sample_weights(generator, noise=noise.get("w"))

    probs = foreground_probs(net(images, weights))
    data_term = -(dataset_size / m) * combined_per_sample(probs, masks).sum()

    fallback = bundle.fallback if bundle is not None else GaussianPrior()
    zero = data_term.new_zeros(())
    kl_dwp, kl_fb = zero, zero
    noise_z = noise.get("z") or {}
    for lid, post in net.posteriors().items():
        w = weights[lid]
        hit = bundle.vae_for(lid) if bundle is not None else None
        if hit is None:
            kl_fb = kl_fb + log_q_elementwise(post.mu, post.log_sigma, w).sum() - fallback.log_prob(w)
            continue
        vae, shift, scale = hit
        ws = w.reshape(-1, 1, 3, 3, 3)
        eps_z = noise_z.get(lid)
        if eps_z is None:
            eps_z = torch.randn(ws.shape[0], vae.latent_dim, generator=generator, dtype=ws.dtype)
        terms = kl_approx_from_sample(ws, post.mu.reshape(ws.shape), post.log_sigma.reshape(ws.shape), vae, eps_z, shift, scale)
        kl_dwp = kl_dwp + terms.sum()
    kl = kl_dwp + kl_fb
    return ElboParts(data_term - kl_weight * kl, data_term, kl, kl_dwp, kl_fb, weights)


def make_dwp_optimizer(net, bundle: Optional[PriorBundle], lr_theta: float = 1e-3, lr_psi: float = 1e-3) -> torch.optim.Adam:
    """Adam over posterior parameters (theta) and VAE encoder parameters (psi) only."""
    groups = [{"params": [p for p in net.parameters() if p.requires_grad], "lr": lr_theta, "name": "theta"}]
    if bundle is not None:
        bundle.freeze_decoders()
        groups.append({"params": list(bundle.encoder_parameters()), "lr": lr_psi, "name": "psi"})
    return torch.optim.Adam(groups)


def train_dwp_step(net, bundle: Optional[PriorBundle], images: Tensor, masks: Tensor, dataset_size: int,
                   optimizer: torch.optim.Optimizer, generator: Optional[torch.Generator] = None,
                   kl_weight: float = 1.0) -> float:
    """One ascent step on the approximate ELBO; returns the objective value before the step."""
    optimizer.zero_grad(set_to_none=True)
    parts = elbo_approx(net, bundle, images, masks, dataset_size, generator, kl_weight=kl_weight)
    (-parts.objective).backward()
    optimizer.step()
    return float(parts.objective.detach())


# --------------------------------------------------------------------------
# kernel VAE training


@dataclass
class VAEHyperparams:
    batch_size: int = 20
    lr0: float = 1e-3
    plateau_patience: int = 15
    plateau_factor: float = 0.1
    plateau_min_delta: float = 1e-4
    stop_lr: float = 1e-6
    max_epochs: int = 500
    latent_dim: int = 6
    max_kernels: Optional[int] = None


def vae_negative_elbo(vae: KernelVAE, x: Tensor, noise_z: Tensor) -> Tensor:
    """Mean over the batch of ``-[log p_phi(x|z) - KL(r_psi(z|x) || N(0, I))]``."""
    mu_z, ls_z = vae.encode(x)
    z = mu_z + torch.exp(ls_z) * noise_z
    mu_x, ls_x = vae.decode(z)
    rec = _sum_event(_normal_logpdf(x, mu_x, ls_x))
    kl = 0.5 * (torch.exp(2 * ls_z) + mu_z**2 - 1.0 - 2 * ls_z).sum(dim=1)
    return (kl - rec).mean()


def reconstruct(vae: KernelVAE, x: Tensor) -> Tensor:
    """Decoder mean at the encoder mean."""
    with torch.no_grad():
        return vae.decode(vae.encode(x)[0])[0]


def train_vae(kernels, hp: Optional[VAEHyperparams] = None, generator: Optional[torch.Generator] = None,
              group: Optional[int] = None) -> KernelVAE:
    """Fit a kernel VAE with Adam and the plateau schedule; returns the best-epoch model."""
    from dwpseg.experiments import PlateauScheduler

    hp = hp or VAEHyperparams()
    generator = generator if generator is not None else torch.Generator().manual_seed(0)
    x_all = torch.as_tensor(np.asarray(kernels), dtype=torch.float32).reshape(-1, 1, 3, 3, 3)
    if hp.max_kernels is not None and x_all.shape[0] > hp.max_kernels:
        idx = torch.randperm(x_all.shape[0], generator=generator)[: hp.max_kernels]
        x_all = x_all[idx]
    n = x_all.shape[0]
    if n < 2 * hp.batch_size:
        raise ValueError(f"need at least {2 * hp.batch_size} kernels, got {n}")
    vae = build_kernel_vae(KernelVAESpec(latent_dim=hp.latent_dim), generator)
    opt = torch.optim.Adam(vae.parameters(), lr=hp.lr0)
    sched = PlateauScheduler(hp.lr0, hp.plateau_patience, hp.plateau_factor, hp.plateau_min_delta, hp.stop_lr)
    best, best_state = math.inf, None
    for epoch in range(hp.max_epochs):
        perm = torch.randperm(n, generator=generator)
        total = 0.0
        for start in range(0, n - hp.batch_size + 1, hp.batch_size):
            xb = x_all[perm[start : start + hp.batch_size]]
            eps = torch.randn(xb.shape[0], hp.latent_dim, generator=generator)
            loss = vae_negative_elbo(vae, xb, eps)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * xb.shape[0]
        epoch_loss = total / (n - n % hp.batch_size)
        if epoch_loss < best:
            best, best_state = epoch_loss, {k: v.clone() for k, v in vae.state_dict().items()}
        lr, stop = sched.step(epoch_loss)
        for g in opt.param_groups:
            g["lr"] = lr
        log.info("VAE group=%s epoch=%d lr=%.1e loss=%.5f", group, epoch, lr, epoch_loss)
        if stop:
            break
    if best_state is not None:
        vae.load_state_dict(best_state)
    return vae
