"""
Gamma Stats - Gamma-distribution math for the latent prior and posterior
Density, ln-Gamma, digamma, closed-form KL, reparameterised sampling and
expectation. All routines work in float64 unless handed tensors of another dtype.
"""

import logging
from dataclasses import dataclass

import torch
from torch.distributions import Gamma, kl_divergence

from sector_ops import masked_mean_loss
from tensor_ops import fork_seed

logger = logging.getLogger(__name__)

KL_FLOOR = -1e-9


class GammaParamError(ValueError):
    """Gamma shape or rate outside (0, inf)"""


def _positive(value):
    if torch.is_tensor(value):
        return bool((value > 0).all())
    return value > 0


@dataclass(frozen=True)
class GammaParams:
    """Shape alpha and rate beta of a Gamma distribution (scalars or tensors)"""

    alpha: float
    beta: float

    def __post_init__(self):
        if not _positive(self.alpha):
            raise GammaParamError(f"Gamma shape alpha must be > 0, got {self.alpha}")
        if not _positive(self.beta):
            raise GammaParamError(f"Gamma rate beta must be > 0, got {self.beta}")

    def as_tensors(self, dtype=torch.float64):
        alpha = self.alpha if torch.is_tensor(self.alpha) else torch.tensor(self.alpha, dtype=dtype)
        beta = self.beta if torch.is_tensor(self.beta) else torch.tensor(self.beta, dtype=dtype)
        return alpha, beta

    def distribution(self):
        alpha, beta = self.as_tensors()
        return Gamma(concentration=alpha, rate=beta)


@dataclass
class GammaParamsMap:
    """Per-latent-pixel Gamma parameters, each shaped [N, 1, h, w]"""

    alpha_map: torch.Tensor
    beta_map: torch.Tensor

    def __post_init__(self):
        if self.alpha_map.shape != self.beta_map.shape:
            raise ValueError(
                f"alpha/beta map shapes differ: {tuple(self.alpha_map.shape)} vs {tuple(self.beta_map.shape)}"
            )
        if not bool((self.alpha_map > 0).all()) or not bool((self.beta_map > 0).all()):
            raise GammaParamError("Gamma parameter maps must be strictly positive")

    @property
    def shape(self):
        return tuple(self.alpha_map.shape)

    @classmethod
    def constant(cls, params, shape, dtype=None):
        dtype = dtype or torch.get_default_dtype()
        return cls(
            torch.full(shape, float(params.alpha), dtype=dtype),
            torch.full(shape, float(params.beta), dtype=dtype),
        )


def _to_tensor(x):
    return x if torch.is_tensor(x) else torch.tensor(float(x), dtype=torch.float64)


def _like_input(result, original):
    return result if torch.is_tensor(original) else float(result)


def lgamma(x):
    """ln Gamma(x) for x > 0"""
    t = _to_tensor(x)
    if not bool((t > 0).all()):
        raise ValueError(f"lgamma domain is x > 0, got {x}")
    return _like_input(torch.lgamma(t), x)


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0"""
    t = _to_tensor(x)
    if not bool((t > 0).all()):
        raise ValueError(f"digamma domain is x > 0, got {x}")
    return _like_input(torch.special.digamma(t), x)


def gamma_pdf(x, p):
    """
    Gamma density beta^alpha / Gamma(alpha) * x^(alpha-1) * exp(-beta x)

    Evaluated in log space and exponentiated.
    """
    t = _to_tensor(x)
    if not bool((t > 0).all()):
        raise ValueError(f"gamma_pdf domain is x > 0, got {x}")
    return _like_input(p.distribution().log_prob(t).exp(), x)


def gamma_log_likelihood(values, alpha, beta):
    """
    Summed Gamma log-density of `values` for every (alpha, beta) pair

    alpha and beta broadcast against each other (e.g. a grid); values is 1-D.
    Uses sufficient statistics so a full grid costs O(len(values) + grid).
    """
    values = torch.as_tensor(values, dtype=torch.float64).reshape(-1)
    alpha = torch.as_tensor(alpha, dtype=torch.float64)
    beta = torch.as_tensor(beta, dtype=torch.float64)
    n = values.numel()
    sum_x = values.sum()
    sum_log_x = values.log().sum()
    return n * (alpha * beta.log() - torch.lgamma(alpha)) + (alpha - 1) * sum_log_x - beta * sum_x


def gamma_kl_tensor(alpha_p, beta_p, alpha_q, beta_q):
    """
    Elementwise KL(Gamma(alpha_p, beta_p) || Gamma(alpha_q, beta_q)), differentiable

    (a_p - a_q) psi(a_p) - lnG(a_p) + lnG(a_q) + a_q (ln b_p - ln b_q) + a_p (b_q - b_p) / b_p
    """
    return kl_divergence(
        Gamma(concentration=alpha_p, rate=beta_p),
        Gamma(concentration=alpha_q, rate=beta_q),
    )


def gamma_kl(p, q):
    """
    Closed-form KL divergence between two Gamma distributions

    Negative round-off is clamped to zero; anything below -1e-9 is logged.
    """
    alpha_p, beta_p = p.as_tensors()
    alpha_q, beta_q = q.as_tensors()
    kl = gamma_kl_tensor(alpha_p, beta_p, alpha_q, beta_q)

    if bool((kl < KL_FLOOR).any()):
        logger.warning(f"Gamma KL below numerical floor ({kl.min().item():.3e}); clamping to 0")
    kl = kl.clamp_min(0.0)
    return kl if kl.dim() else float(kl)


def gamma_kl_map(p_map, q, mask):
    """
    Sector-restricted mean KL between a per-pixel posterior map and a prior

    Per-pixel KL(p_map || q) is multiplied by the binary mask, summed and
    divided by the in-sector pixel count.
    """
    if tuple(mask.mask.shape[-2:]) != tuple(p_map.alpha_map.shape[-2:]):
        raise ValueError(
            f"Mask spatial shape {tuple(mask.mask.shape[-2:])} does not match map "
            f"{tuple(p_map.alpha_map.shape[-2:])}"
        )
    mask.require_nonempty()
    dtype = p_map.alpha_map.dtype
    alpha_q = torch.as_tensor(q.alpha, dtype=dtype)
    beta_q = torch.as_tensor(q.beta, dtype=dtype)
    per_pixel = gamma_kl_tensor(p_map.alpha_map, p_map.beta_map, alpha_q, beta_q)
    return masked_mean_loss(per_pixel, mask)


def gamma_sample(p, n, seed):
    """
    Draw n reparameterised Gamma samples

    Marsaglia-Tsang draws with implicit-reparameterisation gradients
    (torch's Gamma.rsample), so samples are differentiable wrt alpha and beta
    when those are tensors with requires_grad.

    Returns:
        tensor of shape [n, *param_shape]
    """
    if n < 1:
        raise ValueError(f"Sample count must be >= 1, got {n}")
    alpha, beta = p.as_tensors()
    with fork_seed(seed):
        return Gamma(concentration=alpha, rate=beta).rsample((int(n),))


def gamma_expectation(p):
    """E[X] = alpha / beta"""
    return p.alpha / p.beta
