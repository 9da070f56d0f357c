"""
Diffusion - noise schedules, forward processes and the denoising objective
Covers the VE, VP and EDM sigma(t) families, DDPM-style forward noising, the
score/denoiser correspondence, the probability-flow right-hand side and the
sector-masked training loop shared by pixel-space and latent models.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from gamma_vae import ShapeMismatchError, TrainingDivergedError, expected_latent, load_vae
from phantom_data import draw_affine, stack_records, transform_record
from sector_ops import SectorMask, downsample_mask, masked_mean_loss
from spade_unet import DenoiserConfig, build_denoiser, save_denoiser
from tensor_ops import DomainError, fork_seed

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("VE", "VP", "EDM")
RESOLUTION_MODES = {"full_64": 1, "latent_32": 2, "latent_16": 4}

EDM_P_MEAN = -1.2
EDM_P_STD = 1.2
VP_T_MIN = 1e-3
VP_T_MAX = 1.0
DIFFUSION_AUGMENTATIONS = ("geometric",)


class ModelSpecError(ValueError):
    """Inconsistent diffusion model specification"""


@dataclass
class NoiseSchedule:
    """sigma(t) family with its bounds and discretisation exponent"""

    kind: str = "EDM"
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    vp_beta_d: float = 19.9
    vp_beta_min: float = 0.1
    rho: float = 7.0

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"Unknown schedule kind {self.kind}; use one of {SCHEDULE_KINDS}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"Need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.rho <= 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")


def make_schedule(kind, sigma_data=0.5, rho=7.0):
    """
    Default schedule for a kind

    EDM and VE span [0.002, 80] scaled by sigma_data / 0.5; VP spans the
    sigmas of t in [1e-3, 1].
    """
    kind = kind.upper()
    if kind == "VP":
        probe = NoiseSchedule(kind="VP", sigma_min=1e-3, sigma_max=1.0, rho=rho)
        sigma_min = float(sigma_of_t(probe, VP_T_MIN)[0])
        sigma_max = float(sigma_of_t(probe, VP_T_MAX)[0])
        return NoiseSchedule(kind="VP", sigma_min=sigma_min, sigma_max=sigma_max, rho=rho)
    scale = sigma_data / 0.5
    return NoiseSchedule(kind=kind, sigma_min=0.002 * scale, sigma_max=80.0 * scale, rho=rho)


def _as_float_tensor(t):
    return t if torch.is_tensor(t) else torch.tensor(float(t), dtype=torch.float64)


def _like(result, original):
    return result if torch.is_tensor(original) else float(result)


def sigma_of_t(schedule, t):
    """
    Noise level and its time derivative

    Returns:
        (sigma, dsigma/dt) as floats for float t, tensors for tensor t
    """
    tt = _as_float_tensor(t)
    if bool((tt < 0).any()):
        raise DomainError(f"t must be >= 0, got {t}")

    if schedule.kind == "EDM":
        sigma, dsigma = tt, torch.ones_like(tt)
    elif schedule.kind == "VE":
        if bool((tt == 0).any()):
            raise DomainError("VE sigma'(t) is undefined at t = 0")
        sigma = tt.sqrt()
        dsigma = 0.5 / sigma
    else:
        if bool((tt == 0).any()):
            raise DomainError("VP sigma'(t) is undefined at t = 0")
        exponent = 0.5 * schedule.vp_beta_d * tt ** 2 + schedule.vp_beta_min * tt
        sigma = torch.expm1(exponent).sqrt()
        dsigma = (schedule.vp_beta_d * tt + schedule.vp_beta_min) * exponent.exp() / (2 * sigma)
    return _like(sigma, t), _like(dsigma, t)


def sigma_to_t(schedule, sigma):
    """Inverse of sigma_of_t"""
    s = _as_float_tensor(sigma)
    if bool((s < 0).any()):
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    if schedule.kind == "EDM":
        t = s.clone()
    elif schedule.kind == "VE":
        t = s ** 2
    else:
        b_d, b_min = schedule.vp_beta_d, schedule.vp_beta_min
        t = ((b_min ** 2 + 2 * b_d * torch.log1p(s ** 2)).sqrt() - b_min) / b_d
    return _like(t, sigma)


# ===== Forward processes =====

@dataclass
class ForwardProcessConfig:
    """Discrete DDPM forward process with per-step variances beta_t"""

    T: int
    beta_t: list

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if len(self.beta_t) != self.T:
            raise ValueError(f"Need {self.T} beta values, got {len(self.beta_t)}")
        if any(not 0 < b < 1 for b in self.beta_t):
            raise ValueError("Every beta_t must lie in (0, 1)")

    @classmethod
    def constant(cls, T, beta):
        return cls(T=T, beta_t=[float(beta)] * T)

    @classmethod
    def linear(cls, T, beta_start=1e-4, beta_end=0.02):
        return cls(T=T, beta_t=np.linspace(beta_start, beta_end, T).tolist())

    def alpha_bar(self):
        return float(np.prod(1.0 - np.asarray(self.beta_t, dtype=np.float64)))


def ddpm_forward_step(x_prev, beta_t, seed):
    """One draw from N(sqrt(1 - beta_t) x_prev, beta_t I)"""
    if not 0 < beta_t < 1:
        raise ValueError(f"beta_t must lie in (0, 1), got {beta_t}")
    with fork_seed(seed):
        noise = torch.randn_like(x_prev)
    return math.sqrt(1.0 - beta_t) * x_prev + math.sqrt(beta_t) * noise


def ddpm_forward(x0, cfg, seed):
    """Compose all T forward steps; step k uses a seed derived from (seed, k)"""
    seeds = np.random.SeedSequence(seed).generate_state(cfg.T)
    x = x0
    for beta, step_seed in zip(cfg.beta_t, seeds):
        x = ddpm_forward_step(x, beta, int(step_seed))
    return x


def ddpm_marginal_moments(x0, cfg):
    """Closed-form q(x_T | x0): mean sqrt(alpha_bar) x0, variance 1 - alpha_bar"""
    alpha_bar = cfg.alpha_bar()
    return math.sqrt(alpha_bar) * x0, 1.0 - alpha_bar


def add_noise(x0, sigma, seed):
    """
    x = x0 + n with n ~ N(0, sigma^2 I)

    sigma may be a scalar or one value per sample.

    Returns:
        (x, n)
    """
    sigma_t = torch.as_tensor(sigma, dtype=x0.dtype)
    if bool((sigma_t < 0).any()):
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma_t.dim() == 1:
        sigma_t = sigma_t.reshape(-1, *([1] * (x0.dim() - 1)))
    with fork_seed(seed):
        n = torch.randn_like(x0) * sigma_t
    return x0 + n, n


# ===== Score and probability-flow ODE =====

def score_from_denoiser(d_out, x, sigma):
    """(D(x; sigma) - x) / sigma^2"""
    sigma_t = _as_float_tensor(sigma)
    if bool((sigma_t == 0).any()):
        raise DomainError("Score is undefined at sigma = 0")
    if torch.is_tensor(sigma) and sigma.dim() == 1 and x.dim() > 1:
        sigma_t = sigma.reshape(-1, *([1] * (x.dim() - 1)))
    return (d_out - x) / sigma_t.to(x.dtype) ** 2


class NFECounter:
    """Counts denoiser evaluations for one sampling session"""

    def __init__(self):
        self.count = 0

    def increment(self, n=1):
        self.count += n

    def reset(self):
        self.count = 0


def ode_rhs(x, t, denoiser, phi, schedule, counter=None):
    """
    Probability-flow right-hand side dx/dt = (x - D(x | phi; sigma)) sigma'(t) / sigma(t)

    Exactly one denoiser evaluation per call.
    """
    sigma, dsigma = sigma_of_t(schedule, t)
    if sigma == 0:
        raise DomainError("ode_rhs needs sigma(t) > 0")
    d_out = denoiser(x, sigma, phi)
    if counter is not None:
        counter.increment()
    return (x - d_out) * (dsigma / sigma)


class MaskedDenoiser:
    """Restrict a denoiser to the sector: D(x * m) * m"""

    def __init__(self, denoiser, mask):
        self.denoiser = denoiser
        self.mask = mask.mask if isinstance(mask, SectorMask) else mask

    def __call__(self, x, sigma, phi):
        m = self.mask.to(x.dtype)
        return self.denoiser(x * m, sigma, phi) * m


# ===== Analytic denoisers =====

def _sigma_like(sigma, x):
    s = torch.as_tensor(sigma, dtype=x.dtype)
    if s.dim() == 1 and x.dim() > 1:
        s = s.reshape(-1, *([1] * (x.dim() - 1)))
    return s


class GaussianDenoiser:
    """Ideal denoiser for data ~ N(mu, s^2), applied elementwise"""

    def __init__(self, mu=0.0, s=1.0):
        if s <= 0:
            raise ValueError(f"s must be > 0, got {s}")
        self.mu = float(mu)
        self.s = float(s)

    def __call__(self, x, sigma, phi=None):
        sig2 = _sigma_like(sigma, x) ** 2
        return (self.s ** 2 * x + sig2 * self.mu) / (self.s ** 2 + sig2)

    def score(self, x, sigma):
        sig2 = _sigma_like(sigma, x) ** 2
        return -(x - self.mu) / (self.s ** 2 + sig2)


class GaussianMixtureDenoiser:
    """
    Ideal denoiser for a 1-D Gaussian mixture, applied elementwise

    D(x; sigma) is the responsibility-weighted sum of per-component
    posterior means.
    """

    def __init__(self, weights, means, stds):
        if not len(weights) == len(means) == len(stds) or not weights:
            raise ValueError("weights, means and stds must be non-empty and of equal length")
        if any(s <= 0 for s in stds) or any(w <= 0 for w in weights):
            raise ValueError("Mixture weights and stds must be > 0")
        total = float(sum(weights))
        self.weights = torch.tensor([w / total for w in weights], dtype=torch.float64)
        self.means = torch.tensor(means, dtype=torch.float64)
        self.stds = torch.tensor(stds, dtype=torch.float64)

    def _components(self, x, sigma):
        sig2 = _sigma_like(sigma, x)[..., None] ** 2
        xk = x[..., None]
        var = self.stds.to(x.dtype) ** 2 + sig2
        mean = self.means.to(x.dtype)
        log_w = self.weights.to(x.dtype).log() - 0.5 * (var.log() + math.log(2 * math.pi)) \
            - 0.5 * (xk - mean) ** 2 / var
        resp = torch.softmax(log_w, dim=-1)
        return xk, sig2, var, mean, resp

    def __call__(self, x, sigma, phi=None):
        xk, sig2, var, mean, resp = self._components(x, sigma)
        posterior = (self.stds.to(x.dtype) ** 2 * xk + sig2 * mean) / var
        return (resp * posterior).sum(-1)

    def score(self, x, sigma):
        xk, _, var, mean, resp = self._components(x, sigma)
        return (resp * (mean - xk) / var).sum(-1)


# ===== Training =====

def training_t_range(schedule):
    """Time interval whose sigmas span [sigma_min, sigma_max]"""
    return float(sigma_to_t(schedule, schedule.sigma_min)), float(sigma_to_t(schedule, schedule.sigma_max))


def sample_training_sigma(schedule, n, seed, dtype=None):
    """
    Per-sample training noise levels drawn from the schedule's distribution

    EDM draws ln sigma ~ N(P_mean, P_std^2). VE and VP draw t uniformly over
    training_t_range and map it through sigma_of_t.
    """
    dtype = dtype or torch.get_default_dtype()
    with fork_seed(seed):
        if schedule.kind == "EDM":
            return (torch.randn(n, dtype=dtype) * EDM_P_STD + EDM_P_MEAN).exp()
        t_min, t_max = training_t_range(schedule)
        t = torch.rand(n, dtype=dtype) * (t_max - t_min) + t_min
    return sigma_of_t(schedule, t)[0]


def loss_weight(schedule, sigma, sigma_data):
    if schedule.kind == "EDM":
        return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2
    return 1.0 / sigma ** 2


@dataclass
class TrainStepResult:
    loss: float
    raw_mse: float
    sigma: torch.Tensor


def diffusion_train_step(denoiser, batch_x0, batch_phi, mask, schedule, seed, sigma=None, optimizer=None):
    """
    One denoising-score-matching step

    Draws per-sample sigma (unless fixed), noises the in-sector data and
    backpropagates the weighted, sector-masked MSE between D(x0 + n | phi; sigma)
    and x0. Gradients land on the denoiser parameters (and on batch_x0 if it
    requires grad); the optimiser steps when given.

    Returns:
        TrainStepResult with the weighted loss, the unweighted masked MSE and sigmas
    """
    mask = mask if isinstance(mask, SectorMask) else SectorMask(mask)
    mask.require_nonempty()
    n = batch_x0.shape[0]
    noise_seed, sigma_seed = np.random.SeedSequence(seed).generate_state(2)

    if sigma is None:
        sigma = sample_training_sigma(schedule, n, int(sigma_seed), dtype=batch_x0.dtype)
    else:
        sigma = torch.as_tensor(sigma, dtype=batch_x0.dtype).expand(n).clone()

    m = mask.mask.to(batch_x0.dtype)
    x0 = batch_x0 * m
    noisy, _ = add_noise(x0, sigma, int(noise_seed))
    d_out = MaskedDenoiser(denoiser, m)(noisy, sigma, batch_phi)

    sq = (d_out - x0) ** 2
    weight = loss_weight(schedule, sigma, denoiser.sigma_data).reshape(-1, 1, 1, 1)
    loss = masked_mean_loss(weight * sq, mask)
    raw_mse = masked_mean_loss(sq, mask)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"Diffusion loss is {loss.item()} (sigma range {sigma.min():.3g}..{sigma.max():.3g})")

    if optimizer is not None:
        optimizer.zero_grad()
    loss.backward()
    if optimizer is not None:
        optimizer.step()
    return TrainStepResult(loss=loss.item(), raw_mse=raw_mse.item(), sigma=sigma.detach())


# ===== Model spec and latent data =====

@dataclass
class DiffusionModelSpec:
    """One generative model: operating resolution, schedule, denoiser and optional VAE"""

    name: str
    resolution_mode: str = "full_64"
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    vae_checkpoint: str = None
    image_size: int = 64

    def __post_init__(self):
        if self.resolution_mode not in RESOLUTION_MODES:
            raise ModelSpecError(f"Unknown resolution mode {self.resolution_mode}; use one of {list(RESOLUTION_MODES)}")
        if self.is_latent and not self.vae_checkpoint:
            raise ModelSpecError(f"Model '{self.name}': latent mode {self.resolution_mode} needs a VAE checkpoint")
        if not self.is_latent and self.vae_checkpoint:
            raise ModelSpecError(f"Model '{self.name}': full-resolution mode must not reference a VAE")

    @property
    def is_latent(self):
        return self.resolution_mode != "full_64"

    @property
    def factor(self):
        return RESOLUTION_MODES[self.resolution_mode]

    def to_dict(self):
        return {
            "name": self.name,
            "resolution_mode": self.resolution_mode,
            "schedule": asdict(self.schedule),
            "denoiser": asdict(self.denoiser),
            "vae_checkpoint": str(self.vae_checkpoint) if self.vae_checkpoint else None,
            "image_size": self.image_size,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            name=data["name"],
            resolution_mode=data["resolution_mode"],
            schedule=NoiseSchedule(**data["schedule"]),
            denoiser=DenoiserConfig(**data["denoiser"]),
            vae_checkpoint=data.get("vae_checkpoint"),
            image_size=data.get("image_size", 64),
        )


@dataclass
class LatentDataset:
    """Training tensors for one operating space (latent or pixel)"""

    x0: torch.Tensor
    labels: torch.Tensor
    masks: torch.Tensor

    def __len__(self):
        return self.x0.shape[0]


def downsample_labels(labels, factor):
    """Nearest-neighbour label downsampling of [N, H, W] integer maps"""
    if factor == 1:
        return labels
    small = F.interpolate(labels[:, None].double(), scale_factor=1.0 / factor, mode="nearest")
    return small[:, 0].round().long()


def pixel_dataset(records):
    images, masks, labels = stack_records(records)
    return LatentDataset(x0=images * masks, labels=labels, masks=masks)


@torch.no_grad()
def make_latent_dataset(vae, dataset):
    """
    Expected-value latents alpha / beta of every record, with downsampled maps

    Args:
        vae: GammaVAE or a path to its checkpoint
        dataset: list of DatasetRecords at the VAE's image size

    Returns:
        LatentDataset
    """
    if isinstance(vae, (str, Path)):
        vae = load_vae(vae)
    vae.eval()
    images, masks, labels = stack_records(dataset)
    if images.shape[-1] != vae.config.image_size or images.shape[-2] != vae.config.image_size:
        raise ShapeMismatchError(
            f"Records are {tuple(images.shape[-2:])}, VAE expects {vae.config.image_size}x{vae.config.image_size}"
        )
    images = images.to(next(vae.parameters()).dtype)
    latents = expected_latent(vae.encode(images * masks))
    factor = vae.config.factor
    latent_masks = downsample_mask(SectorMask(masks), factor).mask
    return LatentDataset(x0=latents, labels=downsample_labels(labels, factor), masks=latent_masks)


def estimate_sigma_data(x0, masks):
    """In-sector standard deviation of the training data"""
    inside = x0[masks.expand_as(x0) > 0]
    if inside.numel() < 2:
        raise ValueError("Need at least two in-sector values to estimate sigma_data")
    return max(float(inside.std(unbiased=False)), 1e-3)


@dataclass
class DiffusionTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-4
    augmentations: tuple = DIFFUSION_AUGMENTATIONS
    augment_probability: float = 0.5

    def __post_init__(self):
        extra = set(self.augmentations) - set(DIFFUSION_AUGMENTATIONS)
        if extra:
            raise ValueError(f"Diffusion training allows geometric augmentation only, got {sorted(extra)}")


class DiffusionTrainer:
    """Epoch loop over augmented records for one DiffusionModelSpec"""

    LOG_COLUMNS = ["step", "epoch", "loss", "raw_mse", "sigma_mean"]

    def __init__(self, spec, train_config, output_dir, sigma_data=None, seed=0):
        self.spec = spec
        self.train_config = train_config
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.sigma_data = sigma_data
        self.vae = load_vae(spec.vae_checkpoint) if spec.is_latent else None
        self.denoiser = None
        self.optimizer = None
        self.history = []

    def _dataset(self, records):
        if self.vae is None:
            return pixel_dataset(records)
        return make_latent_dataset(self.vae, records)

    def _augment(self, records, rng):
        if "geometric" not in self.train_config.augmentations:
            return records
        return [
            transform_record(r, draw_affine(rng)) if rng.random() < self.train_config.augment_probability else r
            for r in records
        ]

    def _build(self, base):
        if self.sigma_data is None:
            self.sigma_data = estimate_sigma_data(base.x0, base.masks)
        if self.spec.schedule.kind != "VP":
            # EDM/VE bounds scale with the data
            self.spec.schedule = make_schedule(self.spec.schedule.kind, self.sigma_data, self.spec.schedule.rho)
        torch.manual_seed(self.seed)
        self.denoiser = build_denoiser(self.spec.denoiser, self.sigma_data)
        self.optimizer = torch.optim.Adam(self.denoiser.parameters(), lr=self.train_config.learning_rate)
        logger.info(f"Model '{self.spec.name}': sigma_data={self.sigma_data:.4f}, "
                    f"schedule {self.spec.schedule.kind} [{self.spec.schedule.sigma_min:.4g}, {self.spec.schedule.sigma_max:.4g}]")

    def train(self, records, epochs=None):
        """
        Train on DatasetRecords; returns the checkpoint path

        Latent models encode each epoch's augmented records through the VAE.
        """
        epochs = epochs or self.train_config.epochs
        self._build(self._dataset(records))
        self.denoiser.train()
        step = 0
        batch_size = self.train_config.batch_size

        for epoch in tqdm(range(1, epochs + 1), desc=self.spec.name, unit="epoch"):
            rng = np.random.default_rng([self.seed, epoch])
            data = self._dataset(self._augment(records, rng))
            order = torch.from_numpy(rng.permutation(len(data)))
            for start in range(0, len(data), batch_size):
                idx = order[start:start + batch_size]
                result = diffusion_train_step(
                    self.denoiser, data.x0[idx], data.labels[idx], data.masks[idx],
                    self.spec.schedule, seed=int(rng.integers(2 ** 31)), optimizer=self.optimizer,
                )
                step += 1
                self.history.append({
                    "step": step, "epoch": epoch, "loss": result.loss,
                    "raw_mse": result.raw_mse, "sigma_mean": float(result.sigma.mean()),
                })
            recent = self.history[-max(1, len(data) // batch_size):]
            logger.info(f"{self.spec.name} epoch {epoch}: loss={np.mean([h['loss'] for h in recent]):.5f}")

        pd.DataFrame(self.history, columns=self.LOG_COLUMNS).to_csv(
            self.output_dir / f"{self.spec.name}_training_log.csv", index=False
        )
        return self.save(self.output_dir / f"{self.spec.name}.ckpt")

    def save(self, path):
        return save_denoiser(path, self.denoiser, {"spec": self.spec.to_dict(), "seed": self.seed})
