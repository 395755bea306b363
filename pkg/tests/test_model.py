import pytest
import torch

from conftest import randomize_head, small_model_config
from petprompt.errors import ConfigError, ShapeError
from petprompt.model import MODES, FiLM, ModelConfig, PromptUNet, count_parameters, parameter_group


def build(mode, seed=0, **kw):
    torch.manual_seed(seed)
    return PromptUNet(small_model_config(mode, **kw))


class TestIdentityAtInit:
    @pytest.mark.parametrize("mode", MODES)
    def test_untrained_model_is_identity(self, mode):
        model = build(mode)
        x = torch.rand(2, 1, 8, 8, 4)
        assert torch.equal(model(x, 0.15), x)

    def test_head_is_affine_in_last_features(self):
        # out = x + w * h + b with h fixed, so doubling w doubles the correction
        model = randomize_head(build("none"), seed=1)
        x = torch.rand(1, 1, 8, 8, 4)
        assert torch.all(model.head.bias == 0)
        a = model(x) - x
        with torch.no_grad():
            model.head.weight.mul_(2)
        b = model(x) - x
        assert torch.allclose(b, 2 * a, atol=1e-6)


class TestShapes:
    @pytest.mark.parametrize("mode", MODES)
    def test_desk_volume_shape(self, mode):
        torch.manual_seed(0)
        model = PromptUNet(ModelConfig(mode=mode, base_channels=4))
        x = torch.rand(1, 1, 32, 32, 16)
        with torch.no_grad():
            assert model(x, 0.18).shape == (1, 1, 32, 32, 16)

    def test_indivisible_dims(self):
        model = build("none", levels=2)
        with pytest.raises(ShapeError):
            model(torch.rand(1, 1, 8, 8, 6))

    def test_wrong_rank_or_channels(self):
        model = build("none")
        with pytest.raises(ShapeError):
            model(torch.rand(1, 8, 8, 4))
        with pytest.raises(ShapeError):
            model(torch.rand(1, 2, 8, 8, 4))


class TestModes:
    def test_dual_and_gpd_differ(self):
        x = torch.rand(1, 1, 8, 8, 4)
        dual = randomize_head(build("dual"))
        gpd = randomize_head(build("gpd"))
        assert not torch.allclose(dual(x, 0.15), gpd(x))

    @pytest.mark.parametrize("mode", ["none", "gpd"])
    def test_unconditioned_modes_never_read_delta(self, mode, poison):
        model = randomize_head(build(mode))
        x = torch.rand(1, 1, 8, 8, 4)
        assert torch.equal(model(x, poison), model(x))

    @pytest.mark.parametrize("mode", ["dual", "clp", "film"])
    def test_delta_modes_require_delta(self, mode):
        with pytest.raises(ValueError):
            build(mode)(torch.rand(1, 1, 8, 8, 4))

    @pytest.mark.parametrize("mode", ["dual", "clp"])
    def test_delta_modes_respond_to_delta(self, mode):
        model = randomize_head(build(mode))
        x = torch.rand(1, 1, 8, 8, 4)
        assert not torch.equal(model(x, 0.13), model(x, 0.22))

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            ModelConfig(mode="both")

    def test_deterministic(self):
        x = torch.rand(2, 1, 8, 8, 4)
        a = randomize_head(build("dual", seed=5))(x, 0.2)
        b = randomize_head(build("dual", seed=5))(x, 0.2)
        assert torch.equal(a, b)


class TestFiLM:
    def test_identity_at_init(self):
        film = FiLM(3, hidden=4)
        x = torch.randn(2, 3, 2, 2, 2)
        assert torch.equal(film(x, 0.2), x)

    def test_unit_scale_doubles(self):
        film = FiLM(3, hidden=4)
        with torch.no_grad():
            film.fc2.bias.copy_(torch.tensor([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]))
        x = torch.randn(1, 3, 2, 2, 2)
        assert torch.allclose(film(x, 0.2), 2 * x)

    def test_shift(self):
        film = FiLM(2, hidden=4)
        with torch.no_grad():
            film.fc2.bias.copy_(torch.tensor([0.0, 0.0, 0.5, -1.0]))
        x = torch.zeros(1, 2, 2, 2, 2)
        out = film(x, 0.2)
        assert torch.all(out[0, 0] == 0.5) and torch.all(out[0, 1] == -1.0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            FiLM(3)(torch.randn(1, 4, 2, 2, 2), 0.2)


class TestParameterCounts:
    def test_hand_count_smallest_plain_unet(self):
        # stem 28, encoder 60, down 56, bottleneck 228, up 3, decoder 90, head 2
        model = PromptUNet(ModelConfig(levels=1, base_channels=1, mode="none"))
        counts = count_parameters(model)
        assert counts == {
            "stem": 28,
            "encoders.0": 60,
            "downs.0": 56,
            "bottleneck": 228,
            "ups.0": 3,
            "decoders.0": 90,
            "head": 2,
        }
        assert sum(counts.values()) == 467

    def test_prompts_add_parameters(self):
        sizes = {m: sum(count_parameters(PromptUNet(ModelConfig(mode=m))).values()) for m in MODES}
        assert all(sizes["none"] < sizes[m] for m in MODES if m != "none")
        assert sizes["film"] < sizes["gpd"] < sizes["dual"]

    def test_doubling_width_roughly_quadruples(self):
        small = sum(count_parameters(PromptUNet(ModelConfig(mode="none", base_channels=8))).values())
        big = sum(count_parameters(PromptUNet(ModelConfig(mode="none", base_channels=16))).values())
        assert 3.8 < big / small < 4.1

    def test_group_names(self):
        assert parameter_group("skips.0.gpd.components") == "skips.0.gpd"
        assert parameter_group("encoders.1.conv1.weight") == "encoders.1"
        assert parameter_group("head.weight") == "head"
        groups = count_parameters(PromptUNet(ModelConfig(mode="dual")))
        assert {"skips.0.gpd", "skips.0.clp", "skips.0.fusion", "skips.0.inject"} <= set(groups)
