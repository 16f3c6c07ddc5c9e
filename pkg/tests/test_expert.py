import numpy as np
import pytest
import torch

from deblurflow.degrade import ImagePair, apply_blur, load_image, make_kernel, synthesize_sharp_images
from deblurflow.errors import InvalidArgumentError, NotFoundError, NumericFailureError
from deblurflow.expert import (
    CoTrainConfig,
    FidelityExpert,
    SamplerConfig,
    ToyRestorer,
    draw_training_pair,
    expert_restore,
    get_expert,
    make_restorer_expert,
    make_wiener_expert,
    register_expert,
    sample,
    time_grid,
)
from deblurflow.model import ModelConfig, build_net
from deblurflow.rspace import CodecConfig, build_codec, to_chw, to_hwc


def _psnr(a, b):
    return 10 * np.log10(1.0 / np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def _chw(seed=0, shape=(3, 16, 16)):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.uniform(0, 1, shape), dtype=torch.float32)


class TestExpertRestore:
    def test_identity_returns_input_exactly(self):
        y = _chw(1)
        out = expert_restore(get_expert("identity"), y)
        torch.testing.assert_close(out, y, rtol=0, atol=0)

    def test_unknown_id_rejected(self):
        with pytest.raises(NotFoundError):
            get_expert("no-such-expert")

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidArgumentError):
            FidelityExpert("sharpen", None, "x")

    def test_wiener_beats_blur_input(self, tmp_path):
        paths = synthesize_sharp_images(tmp_path, 2, size=64, seed=5)
        for i, p in enumerate(paths):
            x = load_image(p)
            for kind in ("linear", "random-walk"):
                kernel = make_kernel(kind, 11, 8.0, 40 + i)
                y = apply_blur(x, kernel)
                expert = make_wiener_expert(kernel, f"wiener-test-{i}-{kind}")
                x_hat = to_hwc(expert_restore(expert, to_chw(y)))
                assert _psnr(x_hat, x) > _psnr(y, x)

    def test_wiener_output_in_unit_range(self, tmp_path):
        paths = synthesize_sharp_images(tmp_path, 1, size=32, seed=6)
        kernel = make_kernel("linear", 7, 5.0, 3)
        y = apply_blur(load_image(paths[0]), kernel)
        out = expert_restore(make_wiener_expert(kernel, "wiener-range"), to_chw(y))
        assert out.min().item() >= 0.0 and out.max().item() <= 1.0

    def test_untrained_restorer_is_identity(self):
        expert = make_restorer_expert(ToyRestorer(seed=0), "restorer-fresh")
        y = _chw(2)
        torch.testing.assert_close(expert_restore(expert, y), y, rtol=0, atol=0)

    def test_restorer_output_clipped(self):
        module = ToyRestorer(seed=1)
        with torch.no_grad():
            module.body[-1].weight.normal_(std=1.0)
            module.body[-1].bias.fill_(2.0)
        expert = make_restorer_expert(module, "restorer-wild")
        out = expert_restore(expert, _chw(3))
        assert out.min().item() >= 0.0 and out.max().item() <= 1.0

    def test_deterministic(self):
        y = _chw(4)
        expert = get_expert("identity")
        torch.testing.assert_close(expert_restore(expert, y), expert_restore(expert, y),
                                   rtol=0, atol=0)


class TestDrawTrainingPair:
    def _pair(self, seed=0):
        rng = np.random.default_rng(seed)
        return ImagePair(
            torch.tensor(rng.uniform(0, 1, (3, 8, 8)), dtype=torch.float32),
            torch.tensor(rng.uniform(0, 1, (3, 8, 8)), dtype=torch.float32),
            "d",
        )

    def test_rho_one_always_blur(self):
        pair = self._pair(1)
        cfg = CoTrainConfig(rho=1.0, expert="identity")
        for s in range(50):
            start, x = draw_training_pair(cfg, pair, s)
            assert start is pair.blur and x is pair.sharp

    def test_rho_zero_always_expert(self):
        pair = self._pair(2)
        register_expert(FidelityExpert("identity", None, "marker"))
        cfg = CoTrainConfig(rho=0.0, expert="identity")
        for s in range(50):
            start, _ = draw_training_pair(cfg, pair, s)
            torch.testing.assert_close(start, pair.blur, rtol=0, atol=0)

    def test_rho_07_frequency_window(self):
        rng = np.random.default_rng(3)
        pair = ImagePair(
            torch.tensor(rng.uniform(0, 1, (3, 4, 4)), dtype=torch.float32),
            torch.tensor(rng.uniform(0, 1, (3, 4, 4)), dtype=torch.float32),
            "freq",
        )
        # expert branch allocates a new tensor, so object identity tells
        # the two branches apart
        make_restorer_expert(ToyRestorer(width=4, depth=1, seed=0), "marker-tiny")
        cfg = CoTrainConfig(rho=0.7, expert="marker-tiny")
        hits = sum(
            draw_training_pair(cfg, pair, s)[0] is pair.blur for s in range(10_000)
        )
        assert 0.68 <= hits / 10_000 <= 0.72

    def test_deterministic_per_seed(self):
        pair = self._pair(4)
        cfg = CoTrainConfig(rho=0.5, expert="identity")
        a = [draw_training_pair(cfg, pair, s)[0] is pair.blur for s in range(100)]
        b = [draw_training_pair(cfg, pair, s)[0] is pair.blur for s in range(100)]
        assert a == b

    def test_bad_rho_rejected(self):
        with pytest.raises(InvalidArgumentError):
            CoTrainConfig(rho=1.5)


class TestTimeGrid:
    def test_uniform_descending_to_zero(self):
        grid = time_grid(SamplerConfig(steps=4))
        assert grid == [1.0, 0.75, 0.5, 0.25, 0.0]

    def test_start_t_override(self):
        grid = time_grid(SamplerConfig(steps=2, start_t=0.5))
        np.testing.assert_allclose(grid, [0.5, 0.25, 0.0], atol=1e-12)


class TestSampler:
    def _oracle_pair(self, seed=0, size=16):
        rng = np.random.default_rng(seed)
        x = torch.tensor(rng.uniform(0, 1, (3, size, size)), dtype=torch.float64)
        y = torch.tensor(rng.uniform(0, 1, (3, size, size)), dtype=torch.float64)
        return x, y

    def test_oracle_field_single_step_recovers_sharp(self):
        x, y = self._oracle_pair(1)
        out, traj = sample(None, None, SamplerConfig(steps=1), y,
                           field=lambda state, t: y - x)
        torch.testing.assert_close(out, x, rtol=0, atol=1e-9)
        assert len(traj) == 2

    @pytest.mark.parametrize("steps", [1, 5, 10])
    def test_oracle_field_any_steps(self, steps):
        x, y = self._oracle_pair(2)
        out, traj = sample(None, None, SamplerConfig(steps=steps), y,
                           field=lambda state, t: y - x)
        assert (out - x).abs().max().item() < 1e-6
        assert len(traj) == steps + 1

    @pytest.mark.parametrize("steps", [1, 3, 7])
    def test_constant_field_euler_exact(self, steps):
        x, y = self._oracle_pair(3)
        c = torch.full_like(y, 0.3)
        cfg = SamplerConfig(steps=steps, start_t=0.8)
        out, traj = sample(None, None, cfg, y, field=lambda state, t: c)
        want = y - c * 0.8
        assert (traj[-1] - want).abs().max().item() < 1e-6

    def test_zero_field_returns_start_exactly(self):
        x, y = self._oracle_pair(4)
        for steps in (1, 4):
            out, _ = sample(None, None, SamplerConfig(steps=steps), y,
                            field=lambda state, t: torch.zeros_like(y))
            torch.testing.assert_close(out, y, rtol=0, atol=0)

    def test_fresh_codec_returns_expert_estimate_exactly(self):
        codec = build_codec(CodecConfig(stages=2, base_channels=4, latent_channels=12, seed=0))
        net = build_net(ModelConfig(latent_channels=12, grid=4, channels=16, depth=1,
                                    heads=2, time_embed_dim=8, seed=0))
        y = _chw(5, (3, 16, 16))
        make_restorer_expert(ToyRestorer(seed=2), "restorer-sampler-test")
        for steps in (1, 3):
            cfg = SamplerConfig(steps=steps, expert="restorer-sampler-test")
            out, traj = sample(net, codec, cfg, y)
            want = expert_restore(get_expert("restorer-sampler-test"), y)
            torch.testing.assert_close(out, want, rtol=0, atol=0)
            torch.testing.assert_close(traj[0], want, rtol=0, atol=0)

    def test_field_evaluated_on_descending_grid(self):
        x, y = self._oracle_pair(6)
        seen = []

        def field(state, t):
            seen.append(t)
            return torch.zeros_like(y)

        sample(None, None, SamplerConfig(steps=4), y, field=field)
        assert seen == time_grid(SamplerConfig(steps=4))[:-1]
        assert all(a > b for a, b in zip(seen, seen[1:]))

    def test_numpy_input_round_trip(self):
        rng = np.random.default_rng(7)
        y = rng.uniform(0, 1, (12, 12, 3))
        out, traj = sample(None, None, SamplerConfig(steps=2), y,
                           field=lambda state, t: torch.zeros_like(state))
        assert isinstance(out, np.ndarray) and out.shape == (12, 12, 3)
        np.testing.assert_allclose(out, y, atol=0)

    def test_nonfinite_state_reports_step(self):
        x, y = self._oracle_pair(8)

        def field(state, t):
            if t < 0.6:
                return torch.full_like(y, float("inf"))
            return torch.zeros_like(y)

        # grid is [1.0, 0.8, 0.6, 0.4, 0.2]; the first eval below 0.6
        # happens at index 3
        with pytest.raises(NumericFailureError) as err:
            sample(None, None, SamplerConfig(steps=5), y, field=field)
        assert err.value.step == 3

    def test_nonfinite_input_rejected(self):
        y = torch.full((3, 8, 8), float("nan"), dtype=torch.float32)
        with pytest.raises(InvalidArgumentError):
            sample(None, None, SamplerConfig(steps=1), y,
                   field=lambda state, t: torch.zeros_like(state))

    def test_final_output_clipped_but_trajectory_raw(self):
        x, y = self._oracle_pair(9)
        big = torch.full_like(y, 5.0)
        out, traj = sample(None, None, SamplerConfig(steps=1), y,
                           field=lambda state, t: big)
        assert out.min().item() >= 0.0
        assert traj[-1].min().item() < 0.0  # raw state keeps the overshoot

    def test_bad_config_rejected(self):
        with pytest.raises(InvalidArgumentError):
            SamplerConfig(steps=0)
        with pytest.raises(InvalidArgumentError):
            SamplerConfig(schedule="geometric")
        with pytest.raises(InvalidArgumentError):
            SamplerConfig(start_t=0.0)
