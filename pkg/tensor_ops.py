"""
Tensor Ops - checked tensor operations on top of torch autograd
Every differentiable op the other modules rely on, with explicit shape and
domain errors instead of silent broadcasting surprises or NaN.
"""

import contextlib
import logging
import os

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

CHANNEL_STD_EPS = 1e-5
THREADS_ENV_VAR = "GAMMALDM_THREADS"

PRECISION_PROFILES = {
    "float32": torch.float32,
    "float64": torch.float64,
}


class BroadcastError(ValueError):
    """Operand shapes cannot be broadcast together"""


class DomainError(ValueError):
    """Operand lies outside the mathematical domain of the op"""


class ShapeError(ValueError):
    """Operand shape violates an op precondition"""


# ===== Precision, threads, seeding =====

def set_precision(profile):
    """
    Select the default floating dtype for newly created tensors

    Args:
        profile: 'float32' (training default) or 'float64' (gradient checks)
    """
    if profile not in PRECISION_PROFILES:
        raise ValueError(f"Unknown precision profile: {profile}. Use one of {list(PRECISION_PROFILES)}")
    torch.set_default_dtype(PRECISION_PROFILES[profile])
    return PRECISION_PROFILES[profile]


@contextlib.contextmanager
def precision(profile):
    """Temporarily switch the default dtype"""
    previous = torch.get_default_dtype()
    set_precision(profile)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def configure_threads(n_threads=None):
    """
    Pin torch's intra-op thread count

    Falls back to the GAMMALDM_THREADS environment variable, then to
    torch's own default. Returns the thread count in effect.
    """
    if n_threads is None:
        env_value = os.environ.get(THREADS_ENV_VAR)
        if env_value:
            try:
                n_threads = int(env_value)
            except ValueError:
                logger.warning(f"Ignoring non-integer {THREADS_ENV_VAR}={env_value!r}")
    if n_threads is not None:
        if n_threads < 1:
            raise ValueError(f"Thread count must be >= 1, got {n_threads}")
        torch.set_num_threads(n_threads)
    return torch.get_num_threads()


def enable_determinism():
    """Ask torch for deterministic kernels (bit-reproducible for a fixed thread count)"""
    torch.use_deterministic_algorithms(True, warn_only=True)


def seeded_generator(seed):
    """Return a CPU torch.Generator seeded with `seed`"""
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


@contextlib.contextmanager
def fork_seed(seed):
    """
    Run a block under torch's global RNG seeded with `seed`, then restore it

    torch.distributions samplers draw from the global generator; this keeps
    those draws reproducible without leaking state into the caller.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


# ===== Elementwise =====

_UNARY_OPS = {
    "exp": torch.exp,
    "log": torch.log,
    "neg": torch.neg,
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
}

_BINARY_OPS = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
    "pow": torch.pow,
}


def _broadcast_shape(a, b):
    try:
        return torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as e:
        raise BroadcastError(
            f"Cannot broadcast shapes {tuple(a.shape)} and {tuple(b.shape)}"
        ) from e


def elementwise(op_kind, a, b=None):
    """
    Apply an elementwise op with trailing-dimension broadcasting

    Args:
        op_kind: one of add, sub, mul, div, exp, log, pow, neg, relu, sigmoid
        a: first operand
        b: second operand (binary ops only); python scalars are accepted

    Returns:
        torch.Tensor with gradients defined for both operands
    """
    if op_kind in _UNARY_OPS:
        if b is not None:
            raise ValueError(f"'{op_kind}' is unary; got a second operand")
        if op_kind == "log" and bool((a <= 0).any()):
            raise DomainError("log of non-positive value")
        return _UNARY_OPS[op_kind](a)

    if op_kind not in _BINARY_OPS:
        raise ValueError(f"Unknown op kind: {op_kind}")
    if b is None:
        raise ValueError(f"'{op_kind}' needs two operands")

    b = torch.as_tensor(b, dtype=a.dtype) if not torch.is_tensor(b) else b
    _broadcast_shape(a, b)

    if op_kind == "div" and bool((b == 0).any()):
        raise DomainError("division by zero")
    if op_kind == "pow":
        fractional = b != torch.round(b)
        if bool(((a < 0) & fractional).any()):
            raise DomainError("fractional power of a negative base")
    return _BINARY_OPS[op_kind](a, b)


# ===== Linear algebra =====

def matmul(a, b):
    """Matrix product of a [m x k] and b [k x n]"""
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Inner dimensions disagree: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def conv2d(x, w, stride=1, padding=0, bias=None):
    """
    2-D cross-correlation (no kernel flip)

    Output spatial size is floor((H + 2p - kh) / stride) + 1.
    """
    if stride < 1:
        raise ShapeError(f"Invalid stride {stride}")
    if padding < 0:
        raise ShapeError(f"Invalid padding {padding}")
    if x.dim() != 4 or w.dim() != 4:
        raise ShapeError("conv2d expects [N,C,H,W] input and [F,C,kh,kw] kernel")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"Channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    kh, kw = w.shape[2], w.shape[3]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(
            f"Kernel {kh}x{kw} does not fit padded input "
            f"{x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}"
        )
    return F.conv2d(x, w, bias=bias, stride=stride, padding=padding)


# ===== Resampling =====

RESAMPLE_MODES = ("avgpool_down", "nearest_up", "bilinear_up")


def resample(x, mode, factor):
    """
    Resample the two trailing spatial dims of x by an integer factor

    Args:
        x: [N, C, H, W] tensor
        mode: avgpool_down, nearest_up or bilinear_up
        factor: integer scale factor >= 1
    """
    if factor < 1 or int(factor) != factor:
        raise ShapeError(f"Resample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if mode not in RESAMPLE_MODES:
        raise ValueError(f"Unknown resample mode: {mode}")
    if factor == 1:
        return x

    if mode == "avgpool_down":
        h, w = x.shape[-2], x.shape[-1]
        if h % factor or w % factor:
            raise ShapeError(f"Spatial extents {h}x{w} not divisible by {factor}")
        return F.avg_pool2d(x, kernel_size=factor, stride=factor)
    if mode == "nearest_up":
        return F.interpolate(x, scale_factor=factor, mode="nearest")
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


# ===== Reductions =====

REDUCE_KINDS = ("sum", "mean", "channel_mean_std")


def reduce(x, kind, eps=CHANNEL_STD_EPS):
    """
    Reduce a tensor

    Args:
        x: input tensor; channel_mean_std expects [N, C, H, W]
        kind: sum, mean or channel_mean_std
        eps: variance floor applied before the square root

    Returns:
        scalar tensor, or (mu, sigma) each shaped [1, C, 1, 1] for channel_mean_std
    """
    if x.numel() == 0:
        raise ShapeError("Cannot reduce an empty tensor")
    if kind == "sum":
        return x.sum()
    if kind == "mean":
        return x.mean()
    if kind == "channel_mean_std":
        if x.dim() != 4:
            raise ShapeError(f"channel_mean_std expects [N,C,H,W], got {tuple(x.shape)}")
        mu = x.mean(dim=(0, 2, 3), keepdim=True)
        var = ((x - mu) ** 2).mean(dim=(0, 2, 3), keepdim=True)
        sigma = var.clamp_min(eps).sqrt()
        return mu, sigma
    raise ValueError(f"Unknown reduce kind: {kind}")


# ===== Gradient checking =====

def check_gradients(fn, *inputs, eps=1e-6, rtol=1e-4, atol=1e-7):
    """
    Compare autograd gradients of fn against central finite differences

    Inputs are cast to float64 with requires_grad enabled. Returns True when
    every Jacobian entry agrees within atol + rtol * |numeric|.
    """
    prepared = tuple(
        t.detach().to(torch.float64).requires_grad_(True) if torch.is_tensor(t) else t
        for t in inputs
    )
    return torch.autograd.gradcheck(
        fn, prepared, eps=eps, atol=atol, rtol=rtol, raise_exception=False
    )
