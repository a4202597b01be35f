import numpy as np
import pytest

from app.core import ops
from app.core.errors import ConfigError, ContractError, DimensionError, GeometryError
from app.core.gradcheck import grad_check
from app.core.rng import Rng
from app.core.tensor import Tensor
from app.models import Mode, ModelConfig, build_model, get_preset, preset_names
from app.models.layers import drop_path
from app.services.analysis import count_params


def image(config, side=8, seed=0, dtype=np.float64):
    return Tensor(Rng(seed).normal((1, config.in_chans, side, side), dtype=dtype))


class TestModelConfig:
    def test_presets_include_reference_variants(self):
        names = preset_names()
        for name in ("tiny", "small", "base", "large", "huge", "giant", "tiny_no_ffn", "micro"):
            assert name in names

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            get_preset("enormous")

    def test_tiny_geometry(self):
        tiny = get_preset("tiny")
        assert tiny.stage_dims == [96, 192, 384, 768]
        assert tiny.stage_grids(224, 224) == [(56, 56), (28, 28), (14, 14), (7, 7)]
        assert tiny.stage_windows(224, 224) == [7, 7, 7, 7]

    def test_fit_mode_falls_back_to_final_grid_side(self):
        assert get_preset("base").stage_windows(384, 384) == [12, 12, 12, 12]

    @pytest.mark.parametrize("resolution", [32, 64, 128, 256])
    def test_fit_mode_rejects_other_untileable_grids(self, resolution):
        with pytest.raises(GeometryError, match="not divisible"):
            get_preset("tiny").stage_windows(resolution, resolution)

    def test_fit_mode_keeps_tiling_window(self):
        assert get_preset("tiny").stage_windows(448, 448) == [7, 7, 7, 7]

    def test_fit_window_must_match_final_grid(self):
        with pytest.raises(GeometryError):
            get_preset("tiny").with_overrides(fit_window=6).stage_windows(384, 384)
        config = get_preset("tiny").with_overrides(fit_window=2)
        assert config.stage_windows(64, 64) == [2, 2, 2, 2]

    @pytest.mark.parametrize("name", [n for n in preset_names() if get_preset(n).window_size == 7])
    def test_reference_resolution_shapes(self, name):
        config = get_preset(name)
        for resolution, side, window in ((224, 56, 7), (384, 96, 12)):
            grids = config.stage_grids(resolution, resolution)
            assert grids == [(side >> s, side >> s) for s in range(4)]
            assert config.stage_windows(resolution, resolution) == [window] * 4
        assert config.stage_dims == [config.base_dim * 2 ** s for s in range(4)]

    def test_fixed_mode_rejects_untileable_grid(self):
        fixed = get_preset("base").with_overrides(window_mode="fixed")
        with pytest.raises(GeometryError):
            fixed.stage_windows(384, 384)

    def test_untileable_resolution(self):
        with pytest.raises(GeometryError):
            get_preset("tiny").stage_windows(225, 225)

    def test_global_mode_uses_whole_grid(self):
        config = get_preset("tiny").with_overrides(window_mode="global")
        assert config.stage_windows(224, 224) == [56, 28, 14, 7]

    def test_empty_grid_is_geometry_error(self):
        with pytest.raises(GeometryError):
            get_preset("tiny").stage_grids(16, 16)

    @pytest.mark.parametrize("overrides", [
        {"head_dim": 30},
        {"drop_path_rate": 1.0},
        {"depths": (1, 0, 1, 1)},
        {"channel_stages": (5,)},
        {"scale_mode": "inv_sqrt_C"},
        {"unknown_field": 1},
    ])
    def test_invalid_overrides(self, overrides):
        with pytest.raises(ConfigError):
            get_preset("tiny").with_overrides(**overrides)

    def test_drop_path_ramp(self):
        rates = get_preset("tiny").drop_path_rates()
        assert len(rates) == 12
        assert rates[0] == 0.0 and rates[-1] == pytest.approx(0.1)
        assert all(a <= b for a, b in zip(rates, rates[1:]))

    def test_from_dict_applies_preset_then_overrides(self):
        config = ModelConfig.from_dict({"preset": "tiny", "ffn_enabled": False})
        assert config.name == "tiny" and config.base_dim == 96 and not config.ffn_enabled

    def test_config_is_frozen(self):
        with pytest.raises(Exception):
            get_preset("tiny").base_dim = 64

    def test_sub_block_kinds(self):
        assert get_preset("tiny").sub_block_kinds(2) == ("window", "channel")
        assert get_preset("tiny_window_only").sub_block_kinds(2) == ("window", "window")
        assert get_preset("tiny_channel_only").sub_block_kinds(2) == ("channel", "channel")


class TestBuild:
    def test_seeded_weights_are_reproducible(self, gradcheck_config):
        a = build_model(gradcheck_config, seed=3)
        b = build_model(gradcheck_config, seed=3)
        c = build_model(gradcheck_config, seed=4)
        for (name, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(),
                                                c.named_parameters()):
            assert np.array_equal(pa.data, pb.data), name
        assert not all(np.array_equal(pa.data, pc.data)
                       for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters()))

    def test_parameter_rows_match_registered_tensors(self, gradcheck_config):
        params = build_model(gradcheck_config).parameters()
        for row in count_params(gradcheck_config).rows:
            if row.params == 0:
                continue
            size = sum(p.size for name, p in params.items() if name.startswith(row.name + "."))
            assert size == row.params, row.name

    def test_initial_values(self, micro_config):
        params = build_model(micro_config).parameters()
        assert np.all(params["stage1.embed.norm.weight"].data == 1.0)
        assert np.all(params["head.fc.bias"].data == 0.0)
        assert np.abs(params["head.fc.weight"].data).max() <= 2.0001 * micro_config.init_std

    def test_without_ffn_has_no_ffn_parameters(self, gradcheck_config):
        model = build_model(gradcheck_config.with_overrides(ffn_enabled=False))
        names = list(model.parameters())
        assert not any(".ffn." in name or ".norm2." in name for name in names)
        assert any(".cpe2." in name for name in names)

    def test_layouts_share_parameter_count(self, gradcheck_config):
        counts = {build_model(gradcheck_config.with_overrides(block_order=order)).num_parameters()
                  for order in ("window_first", "channel_first", "parallel")}
        assert len(counts) == 1

    def test_build_from_preset_name(self):
        assert build_model("micro").config.name == "micro"


class TestForward:
    def test_feature_shapes(self, gradcheck_config):
        model = build_model(gradcheck_config, dtype=np.float64)
        shapes = [f.shape for f in model.forward_features(image(gradcheck_config))]
        assert shapes == [(1, 8, 8, 16), (1, 4, 4, 32), (1, 2, 2, 64), (1, 1, 1, 128)]

    def test_logits_shape_and_dtype(self, micro_config):
        model = build_model(micro_config)
        logits = model(image(micro_config, side=32, dtype=np.float32))
        assert logits.shape == (1, 4)
        assert logits.dtype == np.float32

    def test_eval_forward_is_bit_exact(self, gradcheck_config):
        x = image(gradcheck_config)
        first = build_model(gradcheck_config, seed=1, dtype=np.float64)(x).data
        second = build_model(gradcheck_config, seed=1, dtype=np.float64)(x).data
        assert np.array_equal(first, second)

    def test_block_orders_differ(self, gradcheck_config):
        x = image(gradcheck_config)
        outputs = [build_model(gradcheck_config.with_overrides(block_order=order),
                               dtype=np.float64)(x).data
                   for order in ("window_first", "channel_first", "parallel")]
        assert not np.array_equal(outputs[0], outputs[1])
        assert not np.array_equal(outputs[0], outputs[2])

    def test_wrong_input_channels(self, micro_config):
        with pytest.raises(DimensionError):
            build_model(micro_config)(Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))

    def test_train_mode_with_drop_path_needs_rng(self, micro_config):
        x = image(micro_config, side=32, dtype=np.float32)
        with pytest.raises(ContractError):
            build_model(micro_config)(x, mode=Mode.TRAIN)

    def test_train_mode_is_reproducible_per_rng(self, micro_config):
        x = Tensor(Rng(0).normal((4, 3, 32, 32), dtype=np.float32))
        model = build_model(micro_config)
        a = model(x, mode=Mode.TRAIN, rng=Rng(9)).data
        b = model(x, mode=Mode.TRAIN, rng=Rng(9)).data
        assert np.array_equal(a, b)

    def test_train_without_drop_path_matches_eval(self, micro_config):
        config = micro_config.with_overrides(drop_path_rate=0.0)
        model = build_model(config)
        x = image(config, side=32, dtype=np.float32)
        assert np.array_equal(model(x, mode=Mode.TRAIN, rng=Rng(5)).data, model(x).data)

    def test_head_on_features_reproduces_forward(self, gradcheck_config):
        model = build_model(gradcheck_config, dtype=np.float64)
        x = image(gradcheck_config)
        assert np.array_equal(model.head(model.forward_features(x)[-1]).data, model(x).data)

    def test_zero_input_is_finite(self, micro_config):
        model = build_model(micro_config)
        logits = model(Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32))).data
        assert np.isfinite(logits).all()
        assert np.array_equal(logits[0], logits[1])

    @pytest.mark.slow
    def test_tiny_reference_forward_shapes(self):
        model = build_model("tiny")
        features = model.forward_features(Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32)))
        assert [f.shape for f in features] == [(1, 56, 56, 96), (1, 28, 28, 192),
                                               (1, 14, 14, 384), (1, 7, 7, 768)]
        assert model.head(features[-1]).shape == (1, 1000)

    def test_channel_attention_layer_lookup(self, gradcheck_config):
        model = build_model(gradcheck_config)
        assert model.channel_attention_layer(2).kind == "channel"
        with pytest.raises(ContractError):
            model.channel_attention_layer(5)
        window_only = build_model(gradcheck_config.with_overrides(channel_stages=()))
        with pytest.raises(ContractError):
            window_only.channel_attention_layer(1)

    def test_end_to_end_gradient_check(self, gradcheck_config):
        model = build_model(gradcheck_config, seed=0, dtype=np.float64)
        error = grad_check(lambda t: ops.cross_entropy(model(t), np.array([1])),
                           image(gradcheck_config), max_coords=24)
        assert error < 1e-3


class TestDropPath:
    def test_eval_is_identity(self, random_tensor):
        x = random_tensor(8, 3)
        assert drop_path(x, 0.5, Mode.EVAL) is x

    def test_train_drops_whole_samples_and_rescales(self):
        x = Tensor(np.ones((256, 3)))
        y = drop_path(x, 0.5, Mode.TRAIN, Rng(0)).data
        rows = set(np.unique(y, axis=0)[:, 0].tolist())
        assert rows == {0.0, 2.0}
        assert 0.35 < (y[:, 0] == 0).mean() < 0.65

    def test_keep_rate_over_many_draws(self):
        y = drop_path(Tensor(np.ones((10000, 2))), 0.3, Mode.TRAIN, Rng(11)).data
        kept = y[:, 0] != 0
        assert abs(kept.mean() - 0.7) < 0.02
        np.testing.assert_allclose(y[kept], 1.0 / 0.7)
        assert np.array_equal(y[:, 0], y[:, 1])

    def test_zero_probability_is_identity_in_train(self, random_tensor):
        x = random_tensor(4, 3)
        assert drop_path(x, 0.0, Mode.TRAIN) is x

    def test_invalid_probability(self, random_tensor):
        with pytest.raises(ConfigError):
            drop_path(random_tensor(2, 2), 1.0, Mode.TRAIN, Rng(0))
