"""
SPADE U-Net - semantic-map conditioned denoiser
SPADE normalisation blocks, the U-Net built from them and the sigma-dependent
preconditioning that turns the raw network into a denoiser D(x | phi; sigma).
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from checkpoint import load_checkpoint, save_module
from sector_ops import LABELS, N_LABELS, InvalidLabelError, SemanticMap
from tensor_ops import CHANNEL_STD_EPS, ShapeError, fork_seed, reduce, resample

logger = logging.getLogger(__name__)

EMBEDDING_SEED = 2024


@dataclass
class DenoiserConfig:
    """U-Net geometry and conditioning placement"""

    levels: int = 3
    base_channels: int = 32
    spade_everywhere: bool = True
    sigma_embedding_dim: int = 32
    spade_hidden: int = 32

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        for name in ("base_channels", "sigma_embedding_dim", "spade_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.sigma_embedding_dim % 2:
            raise ValueError("sigma_embedding_dim must be even (cos/sin pairs)")

    def channels(self, level):
        return self.base_channels * min(2 ** level, 4)


def one_hot(semantic_map, n_labels=N_LABELS, dtype=None):
    """
    Channel-per-label binary encoding of a label image

    Accepts a SemanticMap, a 2-D array, or an integer tensor shaped [H, W] or
    [N, H, W]. Returns [N, n_labels, H, W].
    """
    if isinstance(semantic_map, SemanticMap):
        labels = torch.from_numpy(semantic_map.labels.astype(np.int64))
    else:
        labels = torch.as_tensor(np.asarray(semantic_map) if not torch.is_tensor(semantic_map) else semantic_map)
    labels = labels.long()
    if labels.dim() == 2:
        labels = labels[None]
    if labels.dim() != 3:
        raise ShapeError(f"Label tensor must be [H,W] or [N,H,W], got {tuple(labels.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_labels):
        bad = sorted(set(labels.unique().tolist()) - set(range(n_labels)))
        raise InvalidLabelError(f"Labels {bad} outside alphabet of size {n_labels}")
    encoded = F.one_hot(labels, num_classes=n_labels).permute(0, 3, 1, 2)
    return encoded.to(dtype or torch.get_default_dtype())


def _group_count(channels):
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return groups
    return 1


# ===== SPADE =====

class SpadeBlockParams(nn.Module):
    """Convolutions mapping a resized semantic map to gamma(m) and beta(m)"""

    def __init__(self, label_channels, norm_channels, hidden=32):
        super().__init__()
        self.norm_channels = norm_channels
        self.shared_conv = nn.Sequential(nn.Conv2d(label_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma_conv = nn.Conv2d(hidden, norm_channels, 3, padding=1)
        self.beta_conv = nn.Conv2d(hidden, norm_channels, 3, padding=1)
        # gamma starts around 1 so a fresh block is close to plain normalisation
        nn.init.ones_(self.gamma_conv.bias)
        nn.init.zeros_(self.beta_conv.bias)

    def modulation(self, m):
        shared = self.shared_conv(m)
        return self.gamma_conv(shared), self.beta_conv(shared)


def spade_norm(h, m, params, mu=None, sigma=None, eps=CHANNEL_STD_EPS):
    """
    Spatially adaptive normalisation gamma(m) * (h - mu_c) / sigma_c + beta(m)

    Args:
        h: activations [N, C, H, W]
        m: one-hot semantic map [N, L, H', W'], resized here with nearest neighbour
        params: SpadeBlockParams producing C-channel gamma and beta
        mu, sigma: optional per-channel statistics; default is batch+spatial

    Returns:
        modulated activations, same shape as h
    """
    if h.dim() != 4 or m.dim() != 4:
        raise ShapeError(f"spade_norm expects 4-D h and m, got {tuple(h.shape)} and {tuple(m.shape)}")
    if m.shape[0] != h.shape[0]:
        raise ShapeError(f"Batch mismatch: activations {h.shape[0]}, map {m.shape[0]}")
    if tuple(m.shape[-2:]) != tuple(h.shape[-2:]):
        m = F.interpolate(m, size=tuple(h.shape[-2:]), mode="nearest")

    gamma, beta = params.modulation(m.to(h.dtype))
    if gamma.shape[1] != h.shape[1] or beta.shape[1] != h.shape[1]:
        raise ShapeError(
            f"Modulation has {gamma.shape[1]}/{beta.shape[1]} channels, activations have {h.shape[1]}"
        )
    if mu is None or sigma is None:
        mu, sigma = reduce(h, "channel_mean_std", eps=eps)
    return gamma * (h - mu) / sigma + beta


class ParamFreeNorm(nn.Module):
    """
    Parameter-free per-channel standardisation

    Training mode uses batch+spatial statistics and updates running estimates;
    eval mode uses the running estimates, so a sample's output does not depend
    on what else is in the batch.
    """

    def __init__(self, channels, momentum=0.1, eps=CHANNEL_STD_EPS):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(1, channels, 1, 1))
        self.register_buffer("running_var", torch.ones(1, channels, 1, 1))

    def stats(self, h):
        if self.training:
            mu, sigma = reduce(h, "channel_mean_std", eps=self.eps)
            with torch.no_grad():
                self.running_mean.lerp_(mu.detach().to(self.running_mean.dtype), self.momentum)
                self.running_var.lerp_((sigma.detach() ** 2).to(self.running_var.dtype), self.momentum)
            return mu, sigma
        return self.running_mean.to(h.dtype), self.running_var.clamp_min(self.eps).sqrt().to(h.dtype)


class SPADE(nn.Module):
    """ParamFreeNorm followed by semantic modulation"""

    def __init__(self, channels, label_channels, hidden=32):
        super().__init__()
        self.norm = ParamFreeNorm(channels)
        self.params = SpadeBlockParams(label_channels, channels, hidden)

    def forward(self, h, m):
        mu, sigma = self.norm.stats(h)
        return spade_norm(h, m, self.params, mu=mu, sigma=sigma, eps=self.norm.eps)


class GroupNormAdapter(nn.Module):
    """Plain GroupNorm with the SPADE call signature (map ignored)"""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.GroupNorm(_group_count(channels), channels)

    def forward(self, h, m):
        return self.norm(h)


# ===== U-Net =====

class FourierEmbedding(nn.Module):
    """Fixed random Fourier features of c_noise = ln(sigma) / 4"""

    def __init__(self, dim, scale=16.0):
        super().__init__()
        with fork_seed(EMBEDDING_SEED):
            freqs = torch.randn(dim // 2) * scale
        self.register_buffer("freqs", freqs)

    def forward(self, c_noise):
        angles = 2 * math.pi * c_noise[:, None] * self.freqs[None, :].to(c_noise.dtype)
        return torch.cat([angles.cos(), angles.sin()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, in_channels, out_channels, emb_channels, label_channels, spade, hidden):
        super().__init__()
        make_norm = (lambda c: SPADE(c, label_channels, hidden)) if spade else GroupNormAdapter
        self.norm1 = make_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_channels, out_channels)
        self.norm2 = make_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, h, emb, m):
        out = self.conv1(F.silu(self.norm1(h, m)))
        out = out + self.emb_proj(emb)[:, :, None, None]
        out = self.conv2(F.silu(self.norm2(out, m)))
        return out + self.skip(h)


class SpadeUNet(nn.Module):
    """
    U-Net whose normalisation layers are SPADE blocks

    With spade_everywhere=False only the decoder is SPADE-conditioned and the
    encoder uses GroupNorm.
    """

    def __init__(self, config=None, in_channels=1, label_channels=N_LABELS):
        super().__init__()
        self.config = config or DenoiserConfig()
        cfg = self.config
        self.in_channels = in_channels
        emb_channels = cfg.base_channels * 4

        self.embedding = FourierEmbedding(cfg.sigma_embedding_dim)
        self.emb_mlp = nn.Sequential(
            nn.Linear(cfg.sigma_embedding_dim, emb_channels), nn.SiLU(),
            nn.Linear(emb_channels, emb_channels),
        )
        self.in_conv = nn.Conv2d(in_channels, cfg.base_channels, 3, padding=1)

        def block(cin, cout, spade):
            return ResBlock(cin, cout, emb_channels, label_channels, spade, cfg.spade_hidden)

        self.down = nn.ModuleList()
        skip_channels = []
        channels = cfg.base_channels
        for level in range(cfg.levels):
            out = cfg.channels(level)
            self.down.append(block(channels, out, cfg.spade_everywhere))
            skip_channels.append(out)
            channels = out

        self.middle = block(channels, channels, True)

        self.up = nn.ModuleList()
        for level in reversed(range(cfg.levels)):
            out = skip_channels[level]
            self.up.append(block(channels + out, out, True))
            channels = out

        self.out_norm = SPADE(channels, label_channels, cfg.spade_hidden)
        self.out_conv = nn.Conv2d(channels, in_channels, 3, padding=1)

    @property
    def spatial_factor(self):
        return 2 ** (self.config.levels - 1)

    def forward(self, x, c_noise, m):
        h, w = x.shape[-2:]
        if h % self.spatial_factor or w % self.spatial_factor:
            raise ShapeError(f"Input {h}x{w} not divisible by {self.spatial_factor}")
        emb = self.emb_mlp(self.embedding(c_noise))

        h_ = self.in_conv(x)
        skips = []
        for i, block in enumerate(self.down):
            h_ = block(h_, emb, m)
            skips.append(h_)
            if i < len(self.down) - 1:
                h_ = resample(h_, "avgpool_down", 2)

        h_ = self.middle(h_, emb, m)

        for i, block in enumerate(self.up):
            skip = skips.pop()
            if h_.shape[-2:] != skip.shape[-2:]:
                h_ = resample(h_, "nearest_up", 2)
            h_ = block(torch.cat([h_, skip], dim=1), emb, m)

        return self.out_conv(F.silu(self.out_norm(h_, m)))


# ===== Preconditioning =====

def preconditioning(sigma, sigma_data):
    """(c_skip, c_out, c_in, c_noise) for per-sample sigma"""
    total = sigma ** 2 + sigma_data ** 2
    c_skip = sigma_data ** 2 / total
    c_out = sigma * sigma_data / total.sqrt()
    c_in = 1.0 / total.sqrt()
    c_noise = sigma.log() / 4
    return c_skip, c_out, c_in, c_noise


class PreconditionedDenoiser(nn.Module):
    """D(x | phi; sigma) = c_skip x + c_out F(c_in x, c_noise, phi)"""

    def __init__(self, net, sigma_data=0.5):
        super().__init__()
        if sigma_data <= 0:
            raise ValueError(f"sigma_data must be > 0, got {sigma_data}")
        self.net = net
        self.sigma_data = float(sigma_data)

    def _as_sigma(self, sigma, x):
        sigma = torch.as_tensor(sigma, dtype=x.dtype)
        if sigma.dim() == 0:
            sigma = sigma.expand(x.shape[0])
        sigma = sigma.reshape(-1)
        if sigma.shape[0] != x.shape[0]:
            raise ShapeError(f"{sigma.shape[0]} sigmas for a batch of {x.shape[0]}")
        if bool((sigma <= 0).any()):
            raise ValueError("Denoiser needs sigma > 0")
        return sigma

    def _as_map(self, phi, x):
        if not torch.is_floating_point(phi) or phi.dim() == 3:
            phi = one_hot(phi, dtype=x.dtype)
        phi = phi.to(x.dtype)
        if phi.shape[0] == 1 and x.shape[0] > 1:
            phi = phi.expand(x.shape[0], -1, -1, -1)
        if phi.shape[0] != x.shape[0]:
            raise ShapeError(f"{phi.shape[0]} maps for a batch of {x.shape[0]}")
        (ph, pw), (xh, xw) = phi.shape[-2:], x.shape[-2:]
        if ph * xw != pw * xh or max(ph, xh) % min(ph, xh):
            raise ShapeError(f"Map {ph}x{pw} does not cover the same field of view as input {xh}x{xw}")
        return phi

    def forward(self, x, sigma, phi):
        sigma = self._as_sigma(sigma, x)
        phi = self._as_map(phi, x)
        c_skip, c_out, c_in, c_noise = preconditioning(sigma, self.sigma_data)
        view = (-1, 1, 1, 1)
        raw = self.net(x * c_in.reshape(view), c_noise, phi)
        return c_skip.reshape(view) * x + c_out.reshape(view) * raw


def denoiser_forward(denoiser, x_noisy, sigma, phi):
    """Evaluate a denoiser; output shape equals input shape"""
    out = denoiser(x_noisy, sigma, phi)
    if out.shape != x_noisy.shape:
        raise ShapeError(f"Denoiser changed shape {tuple(x_noisy.shape)} -> {tuple(out.shape)}")
    return out


def build_denoiser(config, sigma_data, in_channels=1, label_channels=N_LABELS):
    return PreconditionedDenoiser(SpadeUNet(config, in_channels, label_channels), sigma_data)


def save_denoiser(path, denoiser, metadata=None):
    meta = {
        "kind": "spade_denoiser",
        "config": asdict(denoiser.net.config),
        "sigma_data": denoiser.sigma_data,
        "in_channels": denoiser.net.in_channels,
        "labels": len(LABELS),
        **(metadata or {}),
    }
    return save_module(path, denoiser, meta)


def load_denoiser(path):
    """Rebuild a PreconditionedDenoiser from a container checkpoint"""
    tensors, metadata = load_checkpoint(path)
    if metadata.get("kind") != "spade_denoiser":
        raise ValueError(f"{path} is not a denoiser checkpoint")
    denoiser = build_denoiser(DenoiserConfig(**metadata["config"]), metadata["sigma_data"],
                              metadata["in_channels"], metadata["labels"])
    denoiser.load_state_dict(tensors)
    denoiser.eval()
    return denoiser, metadata
