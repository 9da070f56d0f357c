import json

import numpy as np
import pytest
import torch

from diffusion import DiffusionModelSpec, GaussianDenoiser, NoiseSchedule, make_schedule, sigma_of_t
from ode_sampler import (
    EulerSolver,
    GenerativeModel,
    HeunSolver,
    SamplerDivergedError,
    SolverConfig,
    discretize_times,
    euler_sample,
    generate_dataset,
    heun_sample,
    initial_noise,
    nfe_to_steps,
    sample,
    solver_order_probe,
)
from phantom_data import load_split, stack_maps
from solver_factory import SolverFactory
from spade_unet import DenoiserConfig, build_denoiser
from tensor_ops import ShapeError

TINY_DENOISER = DenoiserConfig(levels=2, base_channels=8, sigma_embedding_dim=8, spade_hidden=8)


class TestTimeGrid:

    @pytest.mark.parametrize("kind", ["VE", "VP", "EDM"])
    def test_grid_decreasing_and_ends_at_zero(self, kind):
        schedule = make_schedule(kind)
        times = discretize_times(schedule, 10)
        assert times.shape == (11,)
        assert times[-1] == 0.0
        assert bool((times[1:] < times[:-1]).all())
        assert sigma_of_t(schedule, float(times[0]))[0] == pytest.approx(schedule.sigma_max, rel=1e-9)
        assert sigma_of_t(schedule, float(times[-2]))[0] == pytest.approx(schedule.sigma_min, rel=1e-9)

    def test_single_step_grid(self):
        schedule = NoiseSchedule()
        assert discretize_times(schedule, 1).tolist() == [schedule.sigma_max, 0.0]

    def test_invalid_step_count(self):
        with pytest.raises(ValueError):
            discretize_times(NoiseSchedule(), 0)
        with pytest.raises(ValueError):
            SolverConfig(n_steps=0)


class TestNFE:

    @pytest.mark.parametrize("n_steps", range(1, 201))
    def test_reported_evaluations_match_formula(self, n_steps, float64):
        x_T = initial_noise((4, 1, 2, 2), NoiseSchedule(), seeds=[0, 1, 2, 3])
        denoiser = GaussianDenoiser(0.0, 0.5)
        euler = euler_sample(x_T, None, denoiser, SolverConfig("euler", n_steps))
        heun = heun_sample(x_T, None, denoiser, SolverConfig("heun", n_steps))
        assert euler.nfe == n_steps == EulerSolver().nfe(n_steps)
        assert heun.nfe == 2 * n_steps - 1 == HeunSolver().nfe(n_steps)
        assert euler.outputs.shape == heun.outputs.shape == x_T.shape

    @pytest.mark.parametrize("kind,nfe,expected", [
        ("euler", 7, (7, 7)),
        ("heun", 1, (1, 1)),
        ("heun", 35, (18, 35)),
        ("heun", 36, (18, 35)),
        ("heun", 4, (2, 3)),
    ])
    def test_nfe_budget_to_steps(self, kind, nfe, expected):
        assert nfe_to_steps(kind, nfe) == expected

    def test_zero_budget(self):
        with pytest.raises(ValueError):
            nfe_to_steps("heun", 0)

    def test_factory(self):
        assert isinstance(SolverFactory.create_solver("Heun"), HeunSolver)
        assert SolverFactory.get_available_solvers() == ["euler", "heun"]
        with pytest.raises(ValueError):
            SolverFactory.create_solver("dpm")


class TestGaussianSampling:

    @pytest.mark.parametrize("kind", ["euler", "heun"])
    def test_terminal_distribution(self, kind, float64):
        schedule = NoiseSchedule(kind="EDM")
        x_T = initial_noise((4000, 1), schedule, seeds=list(range(4000)))
        report = sample(x_T, None, GaussianDenoiser(mu=0.0, s=0.5), SolverConfig(kind, 64, schedule))
        assert report.outputs.std().item() == pytest.approx(0.5, abs=0.05)
        assert abs(report.outputs.mean().item()) < 0.05

    def test_per_seed_noise_independent_of_batch(self):
        schedule = NoiseSchedule()
        batch = initial_noise((3, 1, 4, 4), schedule, seeds=[11, 12, 13])
        alone = initial_noise((1, 1, 4, 4), schedule, seeds=[12])
        assert torch.equal(batch[1], alone[0])
        with pytest.raises(ValueError):
            initial_noise((2, 1, 4, 4), schedule, seeds=[1])

    def test_divergence_detected(self):
        def exploding(x, sigma, phi):
            return x * float("nan")

        with pytest.raises(SamplerDivergedError):
            sample(torch.ones(2, 1), None, exploding, SolverConfig("euler", 4))


class TestOrderProbe:

    @pytest.mark.parametrize("kind,order,tolerance", [("euler", 1.0, 0.2), ("heun", 2.0, 0.3)])
    def test_fitted_slope(self, kind, order, tolerance, float64):
        result = solver_order_probe(kind, NoiseSchedule(kind="EDM"), [10, 20, 40, 80, 160], s=0.5)
        assert result.slope == pytest.approx(order, abs=tolerance)
        assert result.errors == sorted(result.errors, reverse=True)

    def test_heun_exact_for_rhs_linear_in_time(self, float64):
        times = torch.linspace(2.0, 0.5, 7, dtype=torch.float64)
        x0 = torch.tensor([0.3, -1.2], dtype=torch.float64)

        def rhs(x, t):
            return torch.full_like(x, 3.0 + 2.0 * t)

        t0, t1 = float(times[0]), float(times[-1])
        exact = x0 + 3.0 * (t1 - t0) + (t1 ** 2 - t0 ** 2)
        heun, heun_evals = HeunSolver().integrate(x0, times, rhs)
        euler, _ = EulerSolver().integrate(x0, times, rhs)
        assert heun_evals == 2 * 6
        assert torch.allclose(heun, exact, rtol=0, atol=1e-13)
        assert (euler - exact).abs().max().item() > 1e-3

    def test_euler_and_heun_agree_at_many_steps(self, float64):
        schedule = make_schedule("EDM")
        denoiser = GaussianDenoiser(mu=0.0, s=1.0)
        unit = torch.linspace(-1.0, 1.0, 33, dtype=torch.float64)

        def terminal(kind, x_T):
            return sample(x_T, None, denoiser, SolverConfig(kind, 4096, schedule)).outputs

        deviation = (terminal("euler", unit) - terminal("heun", unit)).abs().max().item()
        assert deviation < 1e-4

        # at sigma_max scale the bound is relative to the terminal magnitude
        x_T = unit * schedule.sigma_max
        heun = terminal("heun", x_T)
        exact = x_T * denoiser.s / (denoiser.s ** 2 + schedule.sigma_max ** 2) ** 0.5
        scale = exact.abs().max().item()
        assert (terminal("euler", x_T) - heun).abs().max().item() < 1e-3 * scale
        assert (heun - exact).abs().max().item() < 1e-5 * scale


def _tiny_model(image_size=64):
    torch.manual_seed(0)
    spec = DiffusionModelSpec(name="dm", denoiser=TINY_DENOISER, schedule=make_schedule("EDM"), image_size=image_size)
    return GenerativeModel(spec, build_denoiser(TINY_DENOISER, sigma_data=0.5))


class TestGeneration:

    def test_generate_respects_sector(self, tiny_corpus):
        model = _tiny_model()
        labels, masks = stack_maps(tiny_corpus.generation_maps[:2])
        report = model.generate(labels, masks, SolverConfig("heun", 3), seeds=[0, 1])
        assert report.nfe == 5
        assert report.outputs.shape == (2, 1, 64, 64)
        assert torch.all(report.outputs[masks == 0] == 0)
        assert float(report.outputs.min()) >= 0 and float(report.outputs.max()) <= 1
        assert report.wall_time > 0

    def test_wrong_map_size(self, tiny_corpus):
        model = _tiny_model(image_size=32)
        labels, masks = stack_maps(tiny_corpus.generation_maps[:1])
        with pytest.raises(ShapeError):
            model.generate(labels, masks, SolverConfig("euler", 2), seeds=[0])

    def test_latent_model_needs_vae(self):
        spec = DiffusionModelSpec(name="ldm", resolution_mode="latent_16", vae_checkpoint="missing.ckpt")
        with pytest.raises(ValueError):
            GenerativeModel(spec, build_denoiser(TINY_DENOISER, sigma_data=0.5))

    def test_dataset_per_nfe_with_shared_noise(self, tiny_corpus, tmp_path):
        model = _tiny_model()
        maps = tiny_corpus.generation_maps[:3]
        datasets = generate_dataset(model, maps, [1, 3], seed=5, output_root=tmp_path, solver_kind="heun",
                                    batch_size=2)
        assert set(datasets) == {1, 3}
        assert [r.name for r in datasets[3]] == [m.name for m in maps]

        with open(tmp_path / "dm" / "nfe_3" / "train" / "manifest.json") as f:
            manifest = json.load(f)
        assert manifest["model"] == "dm" and manifest["nfe"] == 3 and manifest["n_steps"] == 2
        assert len(load_split(tmp_path / "dm" / "nfe_3", "train")) == 3

        again = generate_dataset(model, maps, [3], seed=5, batch_size=3)
        np.testing.assert_allclose(again[3][0].image, datasets[3][0].image, atol=1e-4)
