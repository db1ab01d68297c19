"""Diffusion loss sanity, training-policy contracts, and seeded sampling."""

import pytest
import torch

from updiff.autoencoder import ImageAutoencoder
from updiff.data import generate_synthetic, stack_triplets
from updiff.pipeline import (
    TrainConfig,
    apply_freeze,
    build_conditioner,
    build_denoiser,
    build_schedule,
    diffusion_loss,
    evaluate_model,
    load_bundle,
    make_untrained_bundle,
    sample,
    sample_batch,
    train_diffusion,
    warmup_lr,
)


@pytest.fixture
def tiny_bundle(tiny_config):
    return make_untrained_bundle(tiny_config, seed=0)


class TestDiffusionLoss:
    def test_zero_predictor_unit_loss(self, tiny_bundle):
        # E ||eps||^2 / n = 1 for unit Gaussian noise; >= 10^4 elements
        trips = generate_synthetic(40, 16, seed=0)  # 40 * 4 * 4 * 4 = 2560 per draw
        g = torch.Generator().manual_seed(0)
        zero = lambda z_t, t, lt, lf, tx: torch.zeros_like(z_t)
        losses = [
            float(
                diffusion_loss(
                    trips,
                    tiny_bundle.autoencoder,
                    zero,
                    tiny_bundle.conditioner,
                    tiny_bundle.schedule,
                    g,
                )
            )
            for _ in range(5)
        ]
        mean = sum(losses) / len(losses)
        assert mean == pytest.approx(1.0, abs=0.05)

    def test_perfect_predictor_zero_loss(self, tiny_bundle):
        trips = generate_synthetic(4, 16, seed=1)

        captured = {}

        class Oracle:
            def __call__(self, z_t, t, lt, lf, tx):
                return captured["eps"]

        # reproduce the loss's own draws by replaying the generator
        g = torch.Generator().manual_seed(123)
        pre, mask, post = stack_triplets(trips)
        with torch.no_grad():
            z0 = tiny_bundle.autoencoder.encode(post)
        t = torch.randint(1, tiny_bundle.schedule.T + 1, (4,), generator=g)
        captured["eps"] = torch.randn(z0.shape, generator=g, dtype=z0.dtype)

        g2 = torch.Generator().manual_seed(123)
        loss = diffusion_loss(
            trips, tiny_bundle.autoencoder, Oracle(), tiny_bundle.conditioner, tiny_bundle.schedule, g2
        )
        assert float(loss) <= 1e-12

    def test_batch_order_invariance(self, tiny_bundle):
        trips = generate_synthetic(6, 16, seed=2)
        zero = lambda z_t, t, lt, lf, tx: torch.zeros_like(z_t)

        def loss_for(order):
            g = torch.Generator().manual_seed(7)
            return float(
                diffusion_loss(
                    [trips[i] for i in order],
                    tiny_bundle.autoencoder,
                    zero,
                    tiny_bundle.conditioner,
                    tiny_bundle.schedule,
                    g,
                )
            )

        # same elements, same draws: mean reduction must not care about order
        # (per-sample t/eps are tied to positions, so compare equal multisets
        # of per-position contributions via the zero predictor: loss is the
        # mean of eps^2 which is order-independent for the same generator)
        assert loss_for(range(6)) == pytest.approx(loss_for(range(6)), abs=0)
        forward = loss_for(range(6))
        backward = loss_for(list(reversed(range(6))))
        assert backward == pytest.approx(forward, abs=1e-6)

    def test_empty_batch_rejected(self, tiny_bundle):
        with pytest.raises(ValueError):
            diffusion_loss(
                [],
                tiny_bundle.autoencoder,
                lambda *a: None,
                tiny_bundle.conditioner,
                tiny_bundle.schedule,
                torch.Generator(),
            )

    def test_variance_halves_with_batch_size(self, tiny_bundle):
        zero = lambda z_t, t, lt, lf, tx: torch.zeros_like(z_t)
        trips = generate_synthetic(16, 16, seed=3)

        def loss_variance(batch, n_draws, seed):
            g = torch.Generator().manual_seed(seed)
            vals = [
                float(
                    diffusion_loss(
                        trips[:batch],
                        tiny_bundle.autoencoder,
                        zero,
                        tiny_bundle.conditioner,
                        tiny_bundle.schedule,
                        g,
                    )
                )
                for _ in range(n_draws)
            ]
            mean = sum(vals) / len(vals)
            return sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)

        v_small = loss_variance(4, 180, seed=10)
        v_large = loss_variance(8, 180, seed=11)
        assert v_small / v_large == pytest.approx(2.0, rel=0.45)


class TestWarmup:
    def test_linear_ramp_contract(self):
        base = 5e-5
        for k in range(1, 11):
            assert warmup_lr(base, k, 10) == pytest.approx(base * k / 10)
        assert warmup_lr(base, 25, 10) == base


class TestTrainDiffusion:
    def test_freeze_mode_keeps_backbone_bitwise(self, tiny_config):
        torch.manual_seed(0)
        ae = ImageAutoencoder(tiny_config.autoencoder)
        dataset = generate_synthetic(6, 16, seed=4)
        cfg = TrainConfig(
            max_steps=6,
            batch_size=2,
            warmup_steps=2,
            freeze_mode="paper-faithful",
            warm_pretrain_steps=0,
            val_every=0,
            val_batch=2,
            seed=1,
        )
        result = train_diffusion(dataset, ae, tiny_config, cfg)
        denoiser = result.bundle.denoiser
        conditioner = result.bundle.conditioner

        torch.manual_seed(cfg.seed)
        fresh_denoiser = build_denoiser(tiny_config)
        fresh_conditioner = build_conditioner(tiny_config)

        for trained, fresh in ((denoiser, fresh_denoiser), (conditioner, fresh_conditioner)):
            trained_groups = trained.parameter_groups()
            fresh_groups = fresh.parameter_groups()
            for a, b in zip(trained_groups["backbone"], fresh_groups["backbone"]):
                assert torch.equal(a, b)
            changed = any(
                not torch.equal(a, b)
                for a, b in zip(trained_groups["conditioning"], fresh_groups["conditioning"])
            )
            assert changed or trained is conditioner

    def test_all_trainable_updates_backbone(self, tiny_config):
        torch.manual_seed(0)
        ae = ImageAutoencoder(tiny_config.autoencoder)
        dataset = generate_synthetic(4, 16, seed=5)
        cfg = TrainConfig(max_steps=4, batch_size=2, warmup_steps=1, val_every=0, val_batch=2, seed=2)
        result = train_diffusion(dataset, ae, tiny_config, cfg)
        torch.manual_seed(cfg.seed)
        fresh = build_denoiser(tiny_config)
        groups = result.bundle.denoiser.parameter_groups()
        fresh_groups = fresh.parameter_groups()
        assert any(
            not torch.equal(a, b) for a, b in zip(groups["backbone"], fresh_groups["backbone"])
        )

    def test_checkpoint_round_trip(self, tiny_config, tmp_path):
        torch.manual_seed(0)
        ae = ImageAutoencoder(tiny_config.autoencoder)
        dataset = generate_synthetic(4, 16, seed=6)
        cfg = TrainConfig(max_steps=3, batch_size=2, warmup_steps=1, val_every=0, val_batch=2)
        result = train_diffusion(dataset, ae, tiny_config, cfg, checkpoint_dir=tmp_path / "ck")
        reloaded = load_bundle(tmp_path / "ck")
        t = dataset[0]
        a = sample(t.pre, t.mask, result.bundle, seed=9)
        b = sample(t.pre, t.mask, reloaded, seed=9)
        assert torch.allclose(a, b, atol=1e-6)

    def test_records_initial_and_final_val_loss(self, tiny_config):
        torch.manual_seed(0)
        ae = ImageAutoencoder(tiny_config.autoencoder)
        dataset = generate_synthetic(4, 16, seed=7)
        cfg = TrainConfig(max_steps=2, batch_size=2, warmup_steps=1, val_every=1, val_batch=2)
        result = train_diffusion(dataset, ae, tiny_config, cfg)
        # untrained denoiser predicts zero, so the first value sits near 1
        assert result.initial_val_loss == pytest.approx(1.0, abs=0.15)
        assert result.val_history[0][0] == 0


class TestSampling:
    def test_output_shape_and_range(self, tiny_bundle):
        t = generate_synthetic(1, 16, seed=8)[0]
        out = sample(t.pre, t.mask, tiny_bundle, seed=0)
        assert out.shape == (3, 16, 16)
        assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0

    def test_seeded_determinism(self, tiny_bundle):
        t = generate_synthetic(1, 16, seed=9)[0]
        a = sample(t.pre, t.mask, tiny_bundle, seed=11)
        b = sample(t.pre, t.mask, tiny_bundle, seed=11)
        assert float((a - b).abs().max()) <= 1e-6
        c = sample(t.pre, t.mask, tiny_bundle, seed=12)
        assert not torch.equal(a, c)

    def test_loop_invokes_denoiser_exactly_T_times(self, tiny_bundle, tiny_config):
        calls = []
        real = tiny_bundle.denoiser

        class Counter(torch.nn.Module):
            def forward(self, z, t, lt, lf, tx):
                calls.append(int(t))
                return torch.zeros_like(z)

        bundle = tiny_bundle
        bundle.denoiser = Counter()
        try:
            t = generate_synthetic(1, 16, seed=10)[0]
            sample(t.pre, t.mask, bundle, seed=0)
        finally:
            bundle.denoiser = real
        assert calls == list(range(tiny_config.schedule.steps, 0, -1))

    def test_final_step_noise_is_zero(self, tiny_bundle):
        # with a zero predictor the t=1 update is the deterministic rescale
        # z_0 = z_1 / sqrt(alpha_1); any injected noise would break equality
        schedule = tiny_bundle.schedule
        real = tiny_bundle.denoiser

        class Zero(torch.nn.Module):
            def forward(self, z, t, lt, lf, tx):
                return torch.zeros_like(z)

        seen = {}

        def capture(t, z):
            seen[t] = z.clone()  # state after the step at t, i.e. z_{t-1}

        tiny_bundle.denoiser = Zero()
        try:
            t0 = generate_synthetic(1, 16, seed=11)[0]
            sample_batch(
                t0.pre.unsqueeze(0), t0.mask.unsqueeze(0), tiny_bundle, seed=3, callback=capture
            )
        finally:
            tiny_bundle.denoiser = real
        z1, z0 = seen[2], seen[1]
        assert torch.allclose(z0, z1 / schedule.alpha(1) ** 0.5, atol=1e-6)

    def test_sampler_variants_differ(self, tiny_bundle):
        t = generate_synthetic(1, 16, seed=12)[0]
        a = sample(t.pre, t.mask, tiny_bundle, seed=5, sampler_variant="beta")
        b = sample(t.pre, t.mask, tiny_bundle, seed=5, sampler_variant="sqrt_beta")
        assert not torch.equal(a, b)
        with pytest.raises(ValueError):
            sample(t.pre, t.mask, tiny_bundle, seed=5, sampler_variant="bogus")

    def test_rejects_indivisible_dims(self, tiny_bundle):
        with pytest.raises(ValueError):
            sample(torch.zeros(3, 18, 18), torch.zeros(1, 18, 18), tiny_bundle, seed=0)


class TestEvaluateModel:
    def test_report_deterministic(self, tiny_bundle):
        trips = generate_synthetic(4, 16, seed=13)
        a = evaluate_model(trips, tiny_bundle, seed=2).render()
        b = evaluate_model(trips, tiny_bundle, seed=2).render()
        assert a.encode() == b.encode()
