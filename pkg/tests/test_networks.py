import pytest
import torch

from oneshot_translation.data import ImageBatch
from oneshot_translation.errors import DataError
from oneshot_translation.networks import (PATCH_DISC_LAYERS, NetSpec,
                                          build, load_bundle,
                                          receptive_field, save_bundle)


def _batch(n=2, size=32, seed=0, domain="B"):
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand(n, 3, size, size, generator=g) * 2 - 1, domain)


class TestBuild:
    def test_res32_discriminator_is_per_image(self, tiny_bundle, batch_b):
        scores = tiny_bundle.discriminate(batch_b)
        assert scores.shape == (2, 1)

    def test_res256_discriminator_is_patch_map(self):
        spec = NetSpec(resolution=256, unshared_downsample_layers=2,
                       shared_residual_blocks=1, base_channels=4,
                       latent_channels=8)
        bundle = build(spec, seed=0)
        batch = _batch(1, 256)
        scores = bundle.discriminate(batch)
        assert scores.dim() == 4
        assert scores.shape[1] == 1
        assert scores.shape[2] > 1 and scores.shape[3] > 1

    def test_patch_receptive_field_is_70(self):
        # receptive-field arithmetic oracle over the layer (kernel, stride) list
        assert receptive_field(PATCH_DISC_LAYERS) == 70

    def test_same_seed_same_parameters(self, tiny_spec):
        b1 = build(tiny_spec, seed=7)
        b2 = build(tiny_spec, seed=7)
        for p1, p2 in zip(b1.parameters(), b2.parameters()):
            assert torch.equal(p1, p2)

    def test_different_seed_different_parameters(self, tiny_spec):
        b1 = build(tiny_spec, seed=7)
        b2 = build(tiny_spec, seed=8)
        assert any(not torch.equal(p1, p2)
                   for p1, p2 in zip(b1.parameters(), b2.parameters()))

    def test_unshared_sides_have_equal_param_counts(self, tiny_bundle):
        part = tiny_bundle.partition()
        params = dict(tiny_bundle.named_parameters())
        count_a = sum(params[n].numel() for n, c in part.items()
                      if c == "unshared_a")
        count_b = sum(params[n].numel() for n, c in part.items()
                      if c == "unshared_b")
        assert count_a == count_b

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            NetSpec(resolution=64)
        with pytest.raises(ValueError):
            NetSpec(unshared_downsample_layers=3)
        with pytest.raises(ValueError):
            NetSpec(shared_residual_blocks=0)


class TestPartition:
    def test_partition_is_total_and_disjoint(self, tiny_bundle):
        part = tiny_bundle.partition()
        names = {name for name, _ in tiny_bundle.named_parameters()}
        assert set(part) == names
        params = dict(tiny_bundle.named_parameters())
        total = sum(p.numel() for p in params.values())
        by_class = sum(params[n].numel() for n in part)
        assert by_class == total

    def test_physical_sharing_of_core(self, tiny_bundle, batch_a, batch_b):
        before = tiny_bundle.encode(batch_b, "B").detach().clone()
        with torch.no_grad():
            next(tiny_bundle.enc_shared.parameters()).add_(0.5)
        after = tiny_bundle.encode(batch_b, "B").detach()
        assert not torch.equal(before, after)


class TestEncodeDecode:
    def test_latent_spatial_size(self, tiny_bundle, batch_b, tiny_spec):
        code = tiny_bundle.encode(batch_b, "B")
        expected = 32 // 2 ** tiny_spec.unshared_downsample_layers
        assert code.shape[2:] == (expected, expected)

    def test_roundtrip_shape(self, tiny_bundle, batch_b):
        out = tiny_bundle.decode(tiny_bundle.encode(batch_b, "B"), "B")
        assert out.shape == batch_b.pixels.shape

    def test_decoder_output_in_range(self, tiny_bundle):
        g = torch.Generator().manual_seed(3)
        code = torch.randn(2, 16, 16, 16, generator=g) * 3
        out = tiny_bundle.decode(code, "A")
        assert out.min() >= -1.0
        assert out.max() <= 1.0

    def test_detach_does_not_change_forward(self, tiny_bundle, batch_b):
        tiny_bundle.eval()
        plain = tiny_bundle.encode(batch_b, "B", detach_shared=False)
        detached = tiny_bundle.encode(batch_b, "B", detach_shared=True)
        assert torch.equal(plain, detached)
        out_plain = tiny_bundle.decode(plain, "B", detach_shared=False)
        out_detached = tiny_bundle.decode(plain, "B", detach_shared=True)
        assert torch.equal(out_plain, out_detached)

    def test_detach_zeroes_shared_gradients(self, tiny_bundle, batch_b):
        code = tiny_bundle.encode(batch_b, "B", detach_shared=True)
        out = tiny_bundle.decode(code, "B", detach_shared=True)
        out.pow(2).mean().backward()
        for name, p in tiny_bundle.named_parameters():
            if name.startswith(("enc_shared", "dec_shared")):
                assert p.grad is None or torch.equal(p.grad,
                                                     torch.zeros_like(p.grad))

    def test_cross_side_encoding_is_allowed(self, tiny_bundle, batch_a):
        code = tiny_bundle.encode(batch_a, "B")
        assert code.shape[0] == len(batch_a)

    def test_resolution_mismatch_rejected(self, tiny_bundle):
        with pytest.raises(ValueError, match="resolution"):
            tiny_bundle.encode(_batch(1, 256), "A")
        with pytest.raises(ValueError, match="resolution"):
            tiny_bundle.discriminate(_batch(1, 256))

    def test_eval_forward_deterministic(self, tiny_bundle, batch_b):
        tiny_bundle.eval()
        with torch.no_grad():
            out1 = tiny_bundle.autoencode(batch_b, "B")
            out2 = tiny_bundle.autoencode(batch_b, "B")
        assert torch.equal(out1, out2)


class TestDiscriminate:
    def test_detach_zeroes_discriminator_gradients(self, tiny_bundle, batch_b):
        x = batch_b.pixels.clone().requires_grad_(True)
        scores = tiny_bundle.discriminate(x, detach=True)
        scores.pow(2).mean().backward()
        # gradient still flows to the input, but never to the critic weights
        assert x.grad is not None and x.grad.abs().max() > 0
        for name, p in tiny_bundle.named_parameters():
            if name.startswith("discriminator"):
                assert p.grad is None or torch.equal(p.grad,
                                                     torch.zeros_like(p.grad))

    def test_one_score_row_per_image(self, tiny_bundle):
        scores = tiny_bundle.discriminate(_batch(5))
        assert scores.shape[0] == 5


class TestGradientCorrectness:
    def test_autodiff_matches_finite_differences(self, tiny_spec):
        # central finite differences on a float64 bundle
        bundle = build(tiny_spec, seed=1).double()
        bundle.eval()
        g = torch.Generator().manual_seed(0)
        x = (torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
             * 2 - 1)
        batch = ImageBatch(x, "B")

        def loss_value():
            out = bundle.decode(bundle.encode(batch, "B"), "B")
            return (out - x).abs().mean()

        loss = loss_value()
        loss.backward()
        params = dict(bundle.named_parameters())
        target = "enc_shared.body.0.body.0.weight"
        p = params[target]
        rng = torch.Generator().manual_seed(4)
        flat_idx = torch.randperm(p.numel(), generator=rng)[:10]
        eps = 1e-5
        for idx in flat_idx.tolist():
            with torch.no_grad():
                orig = p.view(-1)[idx].item()
                p.view(-1)[idx] = orig + eps
                up = loss_value().item()
                p.view(-1)[idx] = orig - eps
                down = loss_value().item()
                p.view(-1)[idx] = orig
            fd = (up - down) / (2 * eps)
            ad = p.grad.view(-1)[idx].item()
            assert ad == pytest.approx(fd, rel=1e-3, abs=1e-8)


class TestCheckpoint:
    def test_roundtrip_is_bitwise(self, tiny_bundle, batch_b, tmp_path):
        path = tmp_path / "bundle.pt"
        save_bundle(tiny_bundle, path)
        loaded = load_bundle(path)
        tiny_bundle.eval()
        loaded.eval()
        with torch.no_grad():
            out1 = tiny_bundle.autoencode(batch_b, "B")
            out2 = loaded.autoencode(batch_b, "B")
        assert torch.equal(out1, out2)

    def test_corrupt_file_raises_data_error(self, tmp_path):
        path = tmp_path / "bad.pt"
        path.write_bytes(b"this is not a checkpoint")
        with pytest.raises(DataError, match="corrupt"):
            load_bundle(path)

    def test_version_mismatch_is_explicit(self, tiny_bundle, tmp_path):
        from oneshot_translation.networks import bundle_payload

        payload = bundle_payload(tiny_bundle)
        payload["format_version"] = 99
        path = tmp_path / "future.pt"
        torch.save(payload, str(path))
        with pytest.raises(DataError, match="format version"):
            load_bundle(path)

    def test_partition_qualified_names(self, tiny_bundle):
        from oneshot_translation.networks import bundle_payload

        payload = bundle_payload(tiny_bundle)
        classes = {name.split(":", 1)[0] for name in payload["parameters"]}
        assert classes == {"shared", "unshared_a", "unshared_b",
                           "discriminator"}
