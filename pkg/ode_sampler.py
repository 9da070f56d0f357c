"""
ODE Sampler - deterministic probability-flow sampling with exact NFE accounting
Time grids, Euler and Heun integrators, solver-order probes against the
analytic Gaussian denoiser, and dataset generation for trained models.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from tqdm import tqdm

from diffusion import (
    DiffusionModelSpec,
    GaussianDenoiser,
    MaskedDenoiser,
    NFECounter,
    NoiseSchedule,
    downsample_labels,
    ode_rhs,
    sigma_to_t,
)
from gamma_vae import load_vae
from phantom_data import DatasetRecord, record_name, save_split, stack_maps
from sector_ops import SectorMask, SemanticMap, downsample_mask
from solver_interface import SolverInterface
from spade_unet import load_denoiser
from tensor_ops import ShapeError, fork_seed

logger = logging.getLogger(__name__)

SOLVER_KINDS = ("euler", "heun")
REFERENCE_STEPS = 4096


class SamplerDivergedError(RuntimeError):
    """Solver state became NaN or infinite"""


@dataclass
class SolverConfig:
    kind: str = "heun"
    n_steps: int = 18
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in SOLVER_KINDS:
            raise ValueError(f"Unknown solver kind {self.kind}; use one of {SOLVER_KINDS}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")


@dataclass
class SamplerReport:
    """Denoiser evaluations, wall time and the generated batch"""

    nfe: int
    wall_time: float
    outputs: torch.Tensor
    n_steps: int = 0
    kind: str = ""


def discretize_times(schedule, n_steps):
    """
    rho-spaced noise levels from sigma_max to sigma_min, then 0, as times

    Returns:
        float64 tensor of n_steps + 1 times, strictly decreasing, ending at t(0)
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if n_steps == 1:
        sigmas = torch.tensor([schedule.sigma_max], dtype=torch.float64)
    else:
        inv_rho = 1.0 / schedule.rho
        i = torch.arange(n_steps, dtype=torch.float64)
        sigmas = (schedule.sigma_max ** inv_rho
                  + i / (n_steps - 1) * (schedule.sigma_min ** inv_rho - schedule.sigma_max ** inv_rho)) ** schedule.rho
        sigmas[0] = schedule.sigma_max
        sigmas[-1] = schedule.sigma_min
    sigmas = torch.cat([sigmas, torch.zeros(1, dtype=torch.float64)])
    times = sigma_to_t(schedule, sigmas)
    times[-1] = 0.0
    return times


def _check_state(x, step):
    if not bool(torch.isfinite(x).all()):
        raise SamplerDivergedError(f"Solver state became non-finite at step {step}")


class EulerSolver(SolverInterface):
    """First-order explicit Euler; one evaluation per step"""

    kind = "euler"

    def integrate(self, x, times, rhs):
        evaluations = 0
        for i in range(len(times) - 1):
            t_cur, t_next = float(times[i]), float(times[i + 1])
            x = x + (t_next - t_cur) * rhs(x, t_cur)
            evaluations += 1
            _check_state(x, i)
        return x, evaluations

    def nfe(self, n_steps):
        return n_steps

    def steps_for_nfe(self, nfe):
        if nfe < 1:
            raise ValueError(f"NFE budget must be >= 1, got {nfe}")
        return int(nfe)


class HeunSolver(SolverInterface):
    """
    Euler predictor with a trapezoidal corrector

    The corrector is skipped on a step that ends at t = 0, where the
    right-hand side is singular.
    """

    kind = "heun"

    def integrate(self, x, times, rhs):
        evaluations = 0
        for i in range(len(times) - 1):
            t_cur, t_next = float(times[i]), float(times[i + 1])
            h = t_next - t_cur
            d_cur = rhs(x, t_cur)
            evaluations += 1
            x_pred = x + h * d_cur
            if t_next == 0:
                x = x_pred
            else:
                d_next = rhs(x_pred, t_next)
                evaluations += 1
                x = x + h * 0.5 * (d_cur + d_next)
            _check_state(x, i)
        return x, evaluations

    def nfe(self, n_steps):
        return 2 * n_steps - 1

    def steps_for_nfe(self, nfe):
        if nfe < 1:
            raise ValueError(f"NFE budget must be >= 1, got {nfe}")
        return max(1, (int(nfe) + 1) // 2)


def sample(x_T, phi, denoiser, cfg):
    """Integrate the probability-flow ODE from x_T with the configured solver"""
    from solver_factory import SolverFactory

    solver = SolverFactory.create_solver(cfg.kind)
    counter = NFECounter()
    times = discretize_times(cfg.schedule, cfg.n_steps)

    def rhs(x, t):
        return ode_rhs(x, t, denoiser, phi, cfg.schedule, counter)

    start = time.perf_counter()
    with torch.no_grad():
        x, evaluations = solver.integrate(x_T, times, rhs)
    wall_time = time.perf_counter() - start

    if evaluations != counter.count:
        raise RuntimeError(f"NFE mismatch: solver reported {evaluations}, denoiser saw {counter.count}")
    return SamplerReport(nfe=counter.count, wall_time=wall_time, outputs=x, n_steps=cfg.n_steps, kind=cfg.kind)


def euler_sample(x_T, phi, denoiser, cfg):
    """Euler sampling; nfe = n_steps"""
    return sample(x_T, phi, denoiser, SolverConfig("euler", cfg.n_steps, cfg.schedule, cfg.seed))


def heun_sample(x_T, phi, denoiser, cfg):
    """Heun sampling; nfe = 2 n_steps - 1"""
    return sample(x_T, phi, denoiser, SolverConfig("heun", cfg.n_steps, cfg.schedule, cfg.seed))


def initial_noise(shape, schedule, seeds):
    """
    x_T ~ N(0, sigma_max^2 I), one seed per sample

    A sample's noise depends only on its own seed, never on its batch.
    """
    if len(seeds) != shape[0]:
        raise ValueError(f"{len(seeds)} seeds for a batch of {shape[0]}")
    draws = []
    for seed in seeds:
        with fork_seed(seed):
            draws.append(torch.randn(tuple(shape[1:]), dtype=torch.get_default_dtype()))
    return torch.stack(draws) * schedule.sigma_max


def nfe_to_steps(kind, nfe):
    """Step count for an NFE budget and the NFE it actually uses"""
    from solver_factory import SolverFactory

    solver = SolverFactory.create_solver(kind)
    n_steps = solver.steps_for_nfe(nfe)
    return n_steps, solver.nfe(n_steps)


# ===== Order probes =====

@dataclass
class OrderProbeResult:
    kind: str
    step_counts: list
    errors: list
    slope: float


def solver_order_probe(solver_kind, schedule, step_counts, mu=0.0, s=1.0, x_T=None,
                       reference_steps=REFERENCE_STEPS):
    """
    Fit the global error order of a solver on the analytic Gaussian denoiser

    Errors are max-abs terminal deviations from the same solver at
    reference_steps; the slope is fitted in log-log space against 1/n.
    """
    denoiser = GaussianDenoiser(mu=mu, s=s)
    if x_T is None:
        x_T = torch.linspace(-1.0, 1.0, 33, dtype=torch.float64) * schedule.sigma_max

    def run(n):
        return sample(x_T, None, denoiser, SolverConfig(solver_kind, n, schedule)).outputs

    reference = run(reference_steps)
    errors = [float((run(n) - reference).abs().max()) for n in step_counts]
    if min(errors) <= 0:
        raise ValueError("Zero error against the reference; pick smaller step counts")
    slope = float(np.polyfit(np.log(1.0 / np.asarray(step_counts, dtype=np.float64)), np.log(errors), 1)[0])
    logger.info(f"Order probe {solver_kind}: slope {slope:.3f} over steps {list(step_counts)}")
    return OrderProbeResult(solver_kind, list(step_counts), errors, slope)


# ===== Generation =====

class GenerativeModel:
    """A trained denoiser, its model spec and (for latent modes) the VAE decoder"""

    def __init__(self, spec, denoiser, vae=None):
        if spec.is_latent and vae is None:
            raise ValueError(f"Latent model '{spec.name}' needs its VAE")
        if spec.is_latent and vae.config.factor != spec.factor:
            raise ShapeError(f"VAE factor {vae.config.factor} does not match {spec.resolution_mode}")
        self.spec = spec
        self.denoiser = denoiser
        self.vae = vae
        self.denoiser.eval()
        if vae is not None:
            vae.eval()

    @classmethod
    def load(cls, checkpoint_path):
        denoiser, metadata = load_denoiser(checkpoint_path)
        spec = DiffusionModelSpec.from_dict(metadata["spec"])
        vae = load_vae(spec.vae_checkpoint) if spec.is_latent else None
        return cls(spec, denoiser, vae)

    @property
    def name(self):
        return self.spec.name

    @torch.no_grad()
    def generate(self, labels, masks, solver_cfg, seeds):
        """
        Generate full-resolution images for a batch of semantic maps

        Args:
            labels: [N, H, W] integer maps at the model's image size
            masks: [N, 1, H, W] sector masks
            solver_cfg: SolverConfig (its schedule is replaced by the model's)
            seeds: one initial-noise seed per map

        Returns:
            SamplerReport with outputs [N, 1, H, W] in [0, 1]; wall_time includes decoding
        """
        size = self.spec.image_size
        if labels.shape[-1] != size or labels.shape[-2] != size:
            raise ShapeError(f"Maps are {tuple(labels.shape[-2:])}, model '{self.name}' expects {size}x{size}")

        factor = self.spec.factor
        phi = downsample_labels(labels, factor)
        mask_small = downsample_mask(SectorMask(masks), factor).mask
        x_T = initial_noise((labels.shape[0], 1, size // factor, size // factor), self.spec.schedule, seeds)

        cfg = SolverConfig(solver_cfg.kind, solver_cfg.n_steps, self.spec.schedule, solver_cfg.seed)
        start = time.perf_counter()
        report = sample(x_T * mask_small, phi, MaskedDenoiser(self.denoiser, mask_small), cfg)
        x = report.outputs
        if self.vae is not None:
            x = self.vae.decode(x.clamp_min(0.0))
        images = x.clamp(0.0, 1.0) * masks
        report.outputs = images
        report.wall_time = time.perf_counter() - start
        return report


def _map_seeds(seed, start, count):
    return [int(np.random.SeedSequence([seed, start + k]).generate_state(1)[0]) for k in range(count)]


def generate_dataset(model, semantic_maps, nfe_settings, seed, output_root=None, solver_kind="heun", batch_size=16):
    """
    One synthetic dataset per NFE setting, paired with the conditioning maps

    Each map's initial noise is seeded from (seed, map index), identical
    across NFE settings. When output_root is given every dataset is written
    as output_root/<model>/nfe_<k>/train in the split format with the solver
    settings in its manifest.

    Returns:
        dict nfe_setting -> list of DatasetRecords
    """
    datasets = {}
    for nfe in nfe_settings:
        n_steps, achieved = nfe_to_steps(solver_kind, nfe)
        cfg = SolverConfig(solver_kind, n_steps, model.spec.schedule, seed)
        records = []
        wall_time = 0.0
        for start in tqdm(range(0, len(semantic_maps), batch_size), desc=f"{model.name} NFE {nfe}", unit="batch"):
            chunk = semantic_maps[start:start + batch_size]
            labels, masks = stack_maps(chunk)
            report = model.generate(labels, masks, cfg, _map_seeds(seed, start, len(chunk)))
            if report.nfe != achieved:
                raise RuntimeError(f"Expected {achieved} NFE, sampler used {report.nfe}")
            wall_time += report.wall_time
            for item, image in zip(chunk, report.outputs):
                sector = SectorMask.from_array(item.semantic_map.labels >= 1)
                records.append(DatasetRecord(
                    image=image[0].cpu().numpy().astype(np.float32),
                    semantic_map=SemanticMap(item.semantic_map.labels),
                    sector=sector,
                    view=item.view,
                    phase=item.phase,
                    patient_id=item.patient_id,
                    name=item.name or record_name(item.patient_id, item.view, item.phase),
                ))
        logger.info(f"{model.name}: {len(records)} images at NFE {achieved} ({n_steps} {solver_kind} steps) "
                    f"in {wall_time:.1f}s")

        if output_root is not None:
            save_split(records, Path(output_root) / model.name / f"nfe_{nfe}", "train", extra={
                "model": model.name,
                "solver": solver_kind,
                "n_steps": n_steps,
                "nfe": achieved,
                "nfe_setting": nfe,
                "seed": seed,
            })
        datasets[nfe] = records
    return datasets
