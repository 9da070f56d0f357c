"""
Gamma VAE - one-channel Gamma-distributed latent autoencoder
Encoder predicts per-pixel (alpha, beta) maps, decoder upsamples back to the
image, and the four-term loss is restricted to the ultrasound sector.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from checkpoint import load_checkpoint, save_module
from feature_extractor_interface import FeatureExtractorInterface
from gamma_stats import GammaParams, GammaParamsMap, gamma_kl_map, gamma_log_likelihood
from phantom_data import colour_jitter, draw_affine, stack_records, transform_record
from sector_ops import SectorMask, downsample_mask, masked_mean_loss
from tensor_ops import fork_seed, resample

logger = logging.getLogger(__name__)

POSITIVITY_EPS = 1e-4
PIXEL_FLOOR = 1e-3
DEFAULT_PRIOR = GammaParams(alpha=3.75, beta=10.8)
VAE_AUGMENTATIONS = ("colour", "geometric")


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite during training"""


class ShapeMismatchError(ValueError):
    """Input or latent shape incompatible with the network geometry"""


@dataclass
class VaeConfig:
    """Network geometry; widths follow 64 * layer index per level"""

    levels: int = 2
    width_unit: int = 64
    image_size: int = 64
    in_channels: int = 1

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"VAE needs at least one level, got {self.levels}")
        if self.image_size % (2 ** self.levels):
            raise ShapeMismatchError(
                f"Image size {self.image_size} not divisible by 2^{self.levels}"
            )

    @property
    def latent_size(self):
        return self.image_size // (2 ** self.levels)

    @property
    def factor(self):
        return 2 ** self.levels

    def width(self, level):
        return self.width_unit * level


@dataclass
class VaeLossConfig:
    """Loss weights (reconstruction, perceptual, KL, latent similarity) and the prior"""

    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 1e-3
    lambda4: float = 1.0
    prior: GammaParams = field(default_factory=lambda: DEFAULT_PRIOR)

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


def _norm(channels):
    return nn.GroupNorm(num_groups=min(8, channels), num_channels=channels)


class GammaVAE(nn.Module):
    """Symmetric conv encoder/decoder with a one-channel Gamma latent"""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or VaeConfig()
        cfg = self.config

        encoder = [nn.Conv2d(cfg.in_channels, cfg.width(1), 3, padding=1), nn.SiLU()]
        channels = cfg.width(1)
        for level in range(1, cfg.levels + 1):
            width = cfg.width(level)
            encoder += [
                nn.Conv2d(channels, width, 3, padding=1), _norm(width), nn.SiLU(),
                nn.Conv2d(width, width, 3, stride=2, padding=1), _norm(width), nn.SiLU(),
            ]
            channels = width
        self.encoder = nn.Sequential(*encoder)
        self.param_head = nn.Conv2d(channels, 2, 3, padding=1)

        decoder = [nn.Conv2d(1, channels, 3, padding=1), nn.SiLU()]
        self.up_blocks = nn.ModuleList()
        for level in range(cfg.levels, 0, -1):
            width = cfg.width(max(level - 1, 1))
            self.up_blocks.append(nn.Sequential(
                nn.Conv2d(channels, width, 3, padding=1), _norm(width), nn.SiLU(),
            ))
            channels = width
        self.decoder_stem = nn.Sequential(*decoder)
        self.out_conv = nn.Conv2d(channels, cfg.in_channels, 3, padding=1)

    def encode(self, image):
        """
        Encode an image batch into per-pixel Gamma parameters

        Args:
            image: [N, 1, H, W], H and W divisible by 2^levels

        Returns:
            GammaParamsMap with [N, 1, H/2^L, W/2^L] maps
        """
        h, w = image.shape[-2:]
        if h % self.config.factor or w % self.config.factor:
            raise ShapeMismatchError(f"Input {h}x{w} not divisible by {self.config.factor}")
        raw = self.param_head(self.encoder(image))
        params = F.softplus(raw) + POSITIVITY_EPS
        return GammaParamsMap(params[:, 0:1], params[:, 1:2])

    def decode(self, latent):
        """Decode a [N, 1, h, w] latent to a [N, 1, H, W] image in [0, 1]"""
        if latent.dim() != 4 or latent.shape[1] != 1:
            raise ShapeMismatchError(f"Latent must be [N,1,h,w], got {tuple(latent.shape)}")
        if latent.shape[-1] != self.config.latent_size or latent.shape[-2] != self.config.latent_size:
            raise ShapeMismatchError(
                f"Latent {tuple(latent.shape[-2:])} does not match declared size {self.config.latent_size}"
            )
        h = self.decoder_stem(latent)
        for block in self.up_blocks:
            h = block(resample(h, "nearest_up", 2))
        return torch.sigmoid(self.out_conv(h))

    def reconstruct(self, image):
        """Deterministic encode -> expected latent -> decode"""
        return self.decode(expected_latent(self.encode(image)))


def expected_latent(p):
    """Elementwise alpha / beta; no sampling"""
    return p.alpha_map / p.beta_map


def sample_latent(p, seed):
    """Per-pixel reparameterised Gamma draw (VAE training only)"""
    with fork_seed(seed):
        return torch.distributions.Gamma(p.alpha_map, p.beta_map).rsample()


# ===== Perceptual loss =====

class RandomFeatureExtractor(nn.Module, FeatureExtractorInterface):
    """
    Fixed, seeded, randomly initialised 3-layer conv feature extractor
    Never trained; stands in for a pretrained perceptual network
    """

    def __init__(self, channels=(8, 16, 32), seed=1234, in_channels=1):
        super().__init__()
        with fork_seed(seed):
            layers = []
            previous = in_channels
            for width in channels:
                layers.append(nn.Conv2d(previous, width, 3, padding=1))
                previous = width
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.seed = seed

    @property
    def name(self):
        return f"random_features_seed{self.seed}"

    def extract(self, x):
        features = []
        h = x
        for conv in self.layers:
            h = torch.relu(conv(h))
            features.append(h)
        return features


_default_extractors = {}


def default_extractor(dtype=None):
    dtype = dtype or torch.get_default_dtype()
    if dtype not in _default_extractors:
        _default_extractors[dtype] = RandomFeatureExtractor().to(dtype)
    return _default_extractors[dtype]


def perceptual_loss(X, Y, extractor=None, mask=None):
    """
    Mean squared distance between feature maps of X and Y

    Symmetric in X and Y and exactly 0 for X == Y. When a mask is given the
    squared distance is averaged over in-sector positions only.
    """
    if X.shape != Y.shape:
        raise ShapeMismatchError(f"Perceptual loss shapes differ: {tuple(X.shape)} vs {tuple(Y.shape)}")
    extractor = extractor or default_extractor(X.dtype)
    terms = []
    for fx, fy in zip(extractor.extract(X), extractor.extract(Y)):
        sq = (fx - fy) ** 2
        terms.append(masked_mean_loss(sq, mask) if mask is not None else sq.mean())
    return torch.stack(terms).mean()


# ===== Loss =====

def vae_loss(X, Y, p, cfg, mask, extractor=None):
    """
    Four-term sector-masked Gamma-VAE loss

    lambda1 * MSE(X, Y) + lambda2 * P(X, Y) + lambda3 * KL(p || prior)
    + lambda4 * MSE(x, y), with x the area-averaged downsample of X and
    y the expected latent. Background pixels of X never enter any term.

    Returns:
        (total tensor, dict of component tensors)
    """
    mask.require_nonempty()
    m = mask.mask.to(X.dtype)
    X_in = X * m
    Y_in = Y * m

    factor = X.shape[-1] // p.alpha_map.shape[-1]
    latent_mask = downsample_mask(mask, factor)

    recon = masked_mean_loss((X_in - Y_in) ** 2, mask)
    perceptual = perceptual_loss(X_in, Y_in, extractor=extractor, mask=mask)
    kl = gamma_kl_map(p, cfg.prior, latent_mask)
    x_small = resample(X_in, "avgpool_down", factor)
    latent_sim = masked_mean_loss((x_small - expected_latent(p)) ** 2, latent_mask)

    components = {
        "recon": recon,
        "perceptual": perceptual,
        "kl": kl,
        "latent_sim": latent_sim,
    }
    total = (
        cfg.lambda1 * recon
        + cfg.lambda2 * perceptual
        + cfg.lambda3 * kl
        + cfg.lambda4 * latent_sim
    )
    return total, components


# ===== Prior grid search =====

def _record_pixels(record):
    if hasattr(record, "image"):
        image, sector = record.image, record.sector
    else:
        image, sector = record
    image = torch.as_tensor(np.asarray(image), dtype=torch.float64)
    mask = sector.mask if isinstance(sector, SectorMask) else torch.as_tensor(np.asarray(sector))
    return image[mask.reshape(image.shape) > 0]


def fit_prior_gridsearch(dataset, alpha_grid, beta_grid):
    """
    Pick the (alpha, beta) grid point maximising the in-sector Gamma log-likelihood

    Args:
        dataset: iterable of records with .image and .sector (or (image, mask) pairs)
        alpha_grid, beta_grid: candidate values

    Returns:
        GammaParams
    """
    alpha_grid = torch.as_tensor(list(alpha_grid), dtype=torch.float64)
    beta_grid = torch.as_tensor(list(beta_grid), dtype=torch.float64)
    if alpha_grid.numel() == 0 or beta_grid.numel() == 0:
        raise ValueError("Grid search needs non-empty alpha and beta grids")

    chunks = [_record_pixels(record) for record in dataset]
    if not chunks:
        raise ValueError("Grid search needs a non-empty dataset")
    values = torch.cat(chunks)
    if values.numel() == 0:
        raise ValueError("Dataset has no in-sector pixels")
    values = values.clamp_min(PIXEL_FLOOR)

    ll = gamma_log_likelihood(values, alpha_grid[:, None], beta_grid[None, :])
    best = int(torch.argmax(ll))
    i, j = divmod(best, beta_grid.numel())
    prior = GammaParams(alpha=float(alpha_grid[i]), beta=float(beta_grid[j]))
    logger.info(f"Prior grid search: alpha={prior.alpha}, beta={prior.beta} over {values.numel()} pixels")
    return prior


# ===== Training =====

@dataclass
class VaeTrainConfig:
    """Optimisation settings for train_vae"""

    epochs: int = 20
    batch_size: int = 12
    learning_rate: float = 1e-4
    augmentations: tuple = VAE_AUGMENTATIONS


class VaeTrainer:
    """Epoch loop for the Gamma VAE with CSV logging and container checkpoints"""

    LOG_COLUMNS = ["epoch", "total", "recon", "perceptual", "kl", "latent_sim"]

    def __init__(self, vae_config, loss_config, train_config, output_dir, seed=0):
        self.vae_config = vae_config
        self.loss_config = loss_config
        self.train_config = train_config
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed

        unknown = set(train_config.augmentations) - set(VAE_AUGMENTATIONS)
        if unknown:
            raise ValueError(f"Unknown VAE augmentations: {sorted(unknown)}")

        torch.manual_seed(seed)
        self.model = GammaVAE(vae_config)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=train_config.learning_rate)
        self.extractor = RandomFeatureExtractor()
        self.history = []

    def _augment(self, records, rng):
        augmented = []
        for record in records:
            if "geometric" in self.train_config.augmentations:
                record = transform_record(record, draw_affine(rng))
            if "colour" in self.train_config.augmentations:
                record = colour_jitter(record, rng)
            augmented.append(record)
        return augmented

    def train_epoch(self, records, epoch):
        """Run one epoch; returns the mean of each loss component"""
        self.model.train()
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(records))
        batch_size = self.train_config.batch_size
        sums = {name: 0.0 for name in self.LOG_COLUMNS[1:]}
        n_batches = 0

        for start in range(0, len(order), batch_size):
            batch = [records[i] for i in order[start:start + batch_size]]
            images, masks, _ = stack_records(self._augment(batch, rng))
            mask = SectorMask(masks)
            if mask.count_in == 0:
                continue

            p = self.model.encode(images * mask.mask)
            z = sample_latent(p, seed=int(rng.integers(2 ** 31)))
            recon = self.model.decode(z)
            total, components = vae_loss(images, recon, p, self.loss_config, mask, self.extractor)

            if not torch.isfinite(total):
                detail = ", ".join(f"{k}={v.item():.4g}" for k, v in components.items())
                raise TrainingDivergedError(f"VAE loss diverged at epoch {epoch}, batch {start // batch_size}: {detail}")

            self.optimizer.zero_grad()
            total.backward()
            self.optimizer.step()

            sums["total"] += total.item()
            for name, value in components.items():
                sums[name] += value.item()
            n_batches += 1

        return {name: value / max(n_batches, 1) for name, value in sums.items()}

    def train(self, records, epochs=None):
        """
        Train on DatasetRecords

        Returns:
            Path to the saved checkpoint
        """
        epochs = epochs or self.train_config.epochs
        logger.info(f"Training Gamma VAE: {len(records)} records, {epochs} epochs, "
                    f"levels={self.vae_config.levels}, augmentations={self.train_config.augmentations}")

        for epoch in tqdm(range(1, epochs + 1), desc="VAE", unit="epoch"):
            means = self.train_epoch(records, epoch)
            self.history.append({"epoch": epoch, **means})
            logger.info(f"Epoch {epoch}: " + ", ".join(f"{k}={v:.5f}" for k, v in means.items()))

        log_path = self.output_dir / "vae_training_log.csv"
        pd.DataFrame(self.history, columns=self.LOG_COLUMNS).to_csv(log_path, index=False)
        return self.save(self.output_dir / "vae.ckpt")

    def save(self, path):
        metadata = {
            "kind": "gamma_vae",
            "config": asdict(self.vae_config),
            "prior": {"alpha": float(self.loss_config.prior.alpha), "beta": float(self.loss_config.prior.beta)},
            "seed": self.seed,
        }
        return save_module(path, self.model, metadata)


def train_vae(records, vae_config, loss_config, train_config, output_dir, seed=0):
    """Convenience wrapper: build a VaeTrainer and train it"""
    trainer = VaeTrainer(vae_config, loss_config, train_config, output_dir, seed=seed)
    return trainer.train(records)


def load_vae(path):
    """Rebuild a GammaVAE from a container checkpoint"""
    tensors, metadata = load_checkpoint(path)
    if metadata.get("kind") != "gamma_vae":
        raise ValueError(f"{path} is not a Gamma VAE checkpoint")
    model = GammaVAE(VaeConfig(**metadata["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model


@torch.no_grad()
def evaluate_reconstruction(vae, records):
    """Sector-masked reconstruction MSE of the deterministic path"""
    vae.eval()
    images, masks, _ = stack_records(records)
    mask = SectorMask(masks)
    recon = vae.reconstruct(images * mask.mask)
    return float(masked_mean_loss((images * mask.mask - recon) ** 2, mask))
