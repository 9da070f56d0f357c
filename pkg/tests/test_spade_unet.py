import numpy as np
import pytest
import torch
import torch.nn as nn

from sector_ops import InvalidLabelError, SemanticMap
from spade_unet import (
    DenoiserConfig,
    PreconditionedDenoiser,
    SpadeBlockParams,
    SpadeUNet,
    build_denoiser,
    denoiser_forward,
    load_denoiser,
    one_hot,
    preconditioning,
    save_denoiser,
    spade_norm,
)
from tensor_ops import ShapeError


def _labels(n=2, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.integers(0, 5, size=(n, size, size)))


def _tiny_denoiser(spade_everywhere=True):
    torch.manual_seed(0)
    config = DenoiserConfig(levels=2, base_channels=8, sigma_embedding_dim=8, spade_hidden=8,
                            spade_everywhere=spade_everywhere)
    return build_denoiser(config, sigma_data=0.5)


class TestOneHot:

    def test_channels_and_partition(self):
        labels = _labels()
        encoded = one_hot(labels)
        assert encoded.shape == (2, 5, 16, 16)
        assert torch.all(encoded.sum(dim=1) == 1)
        assert torch.equal(encoded.argmax(dim=1), labels)

    def test_accepts_semantic_map(self):
        encoded = one_hot(SemanticMap(np.array([[0, 4], [2, 1]])))
        assert encoded.shape == (1, 5, 2, 2)
        assert encoded[0, 4, 0, 1] == 1

    def test_out_of_alphabet(self):
        with pytest.raises(InvalidLabelError):
            one_hot(torch.tensor([[0, 7]]))


class TestSpadeNorm:

    def test_unit_gamma_zero_beta_is_plain_normalisation(self):
        params = SpadeBlockParams(label_channels=5, norm_channels=3, hidden=4)
        nn.init.zeros_(params.gamma_conv.weight)
        nn.init.zeros_(params.beta_conv.weight)
        h = torch.randn(2, 3, 8, 8) * 3 + 1
        out = spade_norm(h, one_hot(_labels(size=4)), params)
        mean = h.mean(dim=(0, 2, 3), keepdim=True)
        std = h.var(dim=(0, 2, 3), unbiased=False, keepdim=True).clamp_min(1e-5).sqrt()
        torch.testing.assert_close(out, (h - mean) / std, rtol=1e-4, atol=1e-5)

    def test_modulation_channel_mismatch(self):
        params = SpadeBlockParams(label_channels=5, norm_channels=4)
        with pytest.raises(ShapeError):
            spade_norm(torch.randn(1, 3, 4, 4), one_hot(_labels(n=1, size=4)), params)

    def test_batch_mismatch(self):
        params = SpadeBlockParams(label_channels=5, norm_channels=3)
        with pytest.raises(ShapeError):
            spade_norm(torch.randn(2, 3, 4, 4), one_hot(_labels(n=1, size=4)), params)

    def test_map_changes_output(self):
        params = SpadeBlockParams(label_channels=5, norm_channels=3)
        h = torch.randn(1, 3, 8, 8)
        a = spade_norm(h, one_hot(torch.zeros(1, 8, 8, dtype=torch.long)), params)
        b = spade_norm(h, one_hot(torch.full((1, 8, 8), 2, dtype=torch.long)), params)
        assert not torch.allclose(a, b)


class TestUNet:

    @pytest.mark.parametrize("spade_everywhere", [True, False])
    def test_denoiser_keeps_shape(self, spade_everywhere):
        denoiser = _tiny_denoiser(spade_everywhere)
        x = torch.randn(2, 1, 16, 16)
        out = denoiser_forward(denoiser, x, torch.tensor([0.3, 2.0]), _labels())
        assert out.shape == x.shape

    def test_coarser_map_for_latent_input(self):
        denoiser = _tiny_denoiser()
        out = denoiser(torch.randn(2, 1, 8, 8), 1.0, _labels(size=32))
        assert out.shape == (2, 1, 8, 8)

    def test_mismatched_field_of_view(self):
        denoiser = _tiny_denoiser()
        with pytest.raises(ShapeError):
            denoiser(torch.randn(1, 1, 8, 8), 1.0, _labels(n=1, size=12))

    def test_indivisible_input(self):
        net = SpadeUNet(DenoiserConfig(levels=3, base_channels=8, sigma_embedding_dim=8))
        with pytest.raises(ShapeError):
            net(torch.randn(1, 1, 6, 6), torch.zeros(1), one_hot(_labels(n=1, size=6)))

    def test_non_positive_sigma(self):
        with pytest.raises(ValueError):
            _tiny_denoiser()(torch.randn(1, 1, 8, 8), 0.0, _labels(n=1, size=8))

    def test_eval_output_independent_of_batch(self):
        denoiser = _tiny_denoiser()
        denoiser.train()
        # populate running statistics
        denoiser(torch.randn(4, 1, 16, 16), 1.0, _labels(n=4, seed=1))
        denoiser.eval()
        x = torch.randn(3, 1, 16, 16)
        labels = _labels(n=3, seed=2)
        with torch.no_grad():
            together = denoiser(x, 0.7, labels)
            alone = denoiser(x[:1], 0.7, labels[:1])
        torch.testing.assert_close(together[:1], alone, rtol=1e-5, atol=1e-6)


class TestPreconditioning:

    def test_coefficients(self):
        sigma = torch.tensor([0.5, 2.0], dtype=torch.float64)
        c_skip, c_out, c_in, c_noise = preconditioning(sigma, 0.5)
        assert c_skip[0].item() == pytest.approx(0.5)
        assert c_out[0].item() == pytest.approx(0.25 / np.sqrt(0.5))
        assert c_in[1].item() == pytest.approx(1 / np.sqrt(4.25))
        assert c_noise[1].item() == pytest.approx(np.log(2.0) / 4)

    def test_zero_network_gives_skip_path(self):
        class Zero(nn.Module):
            def forward(self, x, c_noise, m):
                return torch.zeros_like(x)

        denoiser = PreconditionedDenoiser(Zero(), sigma_data=0.5)
        x = torch.randn(2, 1, 4, 4)
        out = denoiser(x, 0.5, _labels(size=4))
        torch.testing.assert_close(out, 0.5 * x)

    def test_sigma_data_positive(self):
        with pytest.raises(ValueError):
            PreconditionedDenoiser(nn.Identity(), sigma_data=0.0)


class TestPersistence:

    def test_save_and_load(self, tmp_path):
        denoiser = _tiny_denoiser()
        denoiser.eval()
        path = save_denoiser(tmp_path / "d.ckpt", denoiser, {"model": "edm"})
        restored, metadata = load_denoiser(path)
        assert metadata["model"] == "edm" and metadata["sigma_data"] == 0.5
        x = torch.randn(1, 1, 16, 16)
        labels = _labels(n=1)
        with torch.no_grad():
            torch.testing.assert_close(restored(x, 1.3, labels), denoiser(x, 1.3, labels))

    def test_wrong_kind(self, tmp_path):
        from checkpoint import save_checkpoint

        save_checkpoint(tmp_path / "x.ckpt", {"w": torch.zeros(1)}, {"kind": "gamma_vae"})
        with pytest.raises(ValueError):
            load_denoiser(tmp_path / "x.ckpt")
