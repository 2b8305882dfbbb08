import pytest
import torch

from oneshot_translation.data import ImageBatch, LoadedDataset
from oneshot_translation.errors import ConfigError, DataError, NumericalError
from oneshot_translation.networks import SHARED
from oneshot_translation.training import (AblationToggles, TrainConfig,
                                          clone_for_phase2, load_checkpoint,
                                          save_checkpoint, train_phase1,
                                          train_phase2, translate)


def _dataset(n=32, seed=0, domain="B"):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 3, 32, 32, generator=g) * 2 - 1
    labels = torch.randint(0, 10, (n,), generator=g)
    return LoadedDataset(images, labels, domain)


def _cfg(phase=1, iterations=2, **kwargs):
    kwargs.setdefault("batch_size_b", 4)
    kwargs.setdefault("log_every", 0)
    return TrainConfig(phase=phase, iterations=iterations, **kwargs)


@pytest.fixture()
def phase1_state(tiny_spec):
    return train_phase1(_dataset(), _cfg(iterations=2), net_spec=tiny_spec)


@pytest.fixture()
def one_shot():
    g = torch.Generator().manual_seed(9)
    return ImageBatch(torch.rand(1, 3, 32, 32, generator=g) * 2 - 1, "A")


class TestPhase1:
    def test_zero_iterations_leaves_init_unchanged(self, tiny_spec):
        from oneshot_translation.networks import build

        cfg = _cfg(iterations=0, seed=3)
        state = train_phase1(_dataset(), cfg, net_spec=tiny_spec)
        reference = build(tiny_spec, seed=3)
        for p1, p2 in zip(state.bundle.parameters(), reference.parameters()):
            assert torch.equal(p1, p2)

    def test_training_changes_shared_and_b_parameters(self, tiny_spec):
        from oneshot_translation.networks import build

        state = train_phase1(_dataset(), _cfg(iterations=2), net_spec=tiny_spec)
        reference = build(tiny_spec, seed=0)
        part = state.bundle.partition()
        ref = dict(reference.named_parameters())
        moved = {cls: False for cls in ("shared", "unshared_b",
                                        "discriminator")}
        for name, p in state.bundle.named_parameters():
            if part[name] in moved and not torch.equal(p, ref[name]):
                moved[part[name]] = True
        assert all(moved.values())

    def test_a_side_untouched_in_phase1(self, tiny_spec):
        from oneshot_translation.networks import build

        state = train_phase1(_dataset(), _cfg(iterations=2), net_spec=tiny_spec)
        reference = build(tiny_spec, seed=0)
        part = state.bundle.partition()
        ref = dict(reference.named_parameters())
        for name, p in state.bundle.named_parameters():
            if part[name] == "unshared_a":
                assert torch.equal(p, ref[name]), name

    def test_deterministic_given_seed(self, tiny_spec):
        s1 = train_phase1(_dataset(), _cfg(iterations=2), net_spec=tiny_spec)
        s2 = train_phase1(_dataset(), _cfg(iterations=2), net_spec=tiny_spec)
        for p1, p2 in zip(s1.bundle.parameters(), s2.bundle.parameters()):
            assert torch.equal(p1, p2)

    def test_wrong_phase_rejected(self, tiny_spec):
        with pytest.raises(ConfigError, match="phase"):
            train_phase1(_dataset(), _cfg(phase=2), net_spec=tiny_spec)

    def test_metrics_written(self, tiny_spec, tmp_path):
        cfg = _cfg(iterations=2, log_every=1)
        train_phase1(_dataset(), cfg, net_spec=tiny_spec, out_dir=tmp_path)
        lines = (tmp_path / "metrics" / "phase1.jsonl").read_text().splitlines()
        assert len(lines) == 2


class TestClone:
    def test_translate_ab_equals_b_autoencode_right_after_clone(
            self, phase1_state):
        state = clone_for_phase2(phase1_state)
        g = torch.Generator().manual_seed(4)
        batch = ImageBatch(torch.rand(2, 3, 32, 32, generator=g) * 2 - 1, "A")
        state.bundle.eval()
        with torch.no_grad():
            via_a = translate(state, batch, "AB").pixels
            as_b = state.bundle.autoencode(
                ImageBatch(batch.pixels, "B"), "B")
        assert torch.equal(via_a, as_b)

    def test_clone_is_a_value_copy(self, phase1_state):
        state = clone_for_phase2(phase1_state)
        bundle = state.bundle
        with torch.no_grad():
            next(bundle.enc_a_unshared.parameters()).add_(1.0)
        pa = next(bundle.enc_a_unshared.parameters())
        pb = next(bundle.enc_b_unshared.parameters())
        assert not torch.equal(pa, pb)

    def test_clone_requires_phase1_state(self, phase1_state):
        state = clone_for_phase2(phase1_state)
        with pytest.raises(ConfigError, match="phase-1"):
            clone_for_phase2(state)

    def test_optimizer_moments_start_fresh(self, phase1_state):
        state = clone_for_phase2(phase1_state)
        assert state.opt_generator is None
        assert state.opt_discriminator is None
        assert state.iteration == 0


class TestPhase2:
    def test_updates_all_generator_classes(self, phase1_state, one_shot):
        state = clone_for_phase2(phase1_state)
        before = {n: p.detach().clone()
                  for n, p in state.bundle.named_parameters()}
        train_phase2(state, one_shot, _dataset(seed=1), _cfg(2, iterations=2))
        part = state.bundle.partition()
        moved = {cls: False for cls in ("shared", "unshared_a", "unshared_b")}
        for name, p in state.bundle.named_parameters():
            if part[name] in moved and not torch.equal(p, before[name]):
                moved[part[name]] = True
        # the shared core still moves, via the domain-B terms only
        assert all(moved.values())

    def test_shared_frozen_toggle_pins_core_bitwise(self, phase1_state,
                                                    one_shot):
        state = clone_for_phase2(phase1_state)
        before = {n: p.detach().clone()
                  for n, p in state.bundle.named_parameters()}
        cfg = _cfg(2, iterations=2,
                   toggles=AblationToggles(shared_frozen=True))
        train_phase2(state, one_shot, _dataset(seed=1), cfg)
        part = state.bundle.partition()
        for name, p in state.bundle.named_parameters():
            if part[name] == SHARED:
                assert torch.equal(p, before[name]), name

    def test_requires_phase2_state(self, phase1_state, one_shot):
        with pytest.raises(ConfigError, match="clone_for_phase2"):
            train_phase2(phase1_state, one_shot, _dataset(), _cfg(2))

    def test_rejects_b_tagged_sample(self, phase1_state):
        state = clone_for_phase2(phase1_state)
        bad = ImageBatch(torch.zeros(1, 3, 32, 32), "B")
        with pytest.raises(ConfigError, match="domain"):
            train_phase2(state, bad, _dataset(), _cfg(2))

    def test_audit_runs_at_first_iteration(self, phase1_state, one_shot,
                                           monkeypatch):
        import oneshot_translation.training as T

        calls = []
        real = T._audit_phase2
        monkeypatch.setattr(T, "_audit_phase2",
                            lambda *a, **k: calls.append(1) or real(*a, **k))
        state = clone_for_phase2(phase1_state)
        train_phase2(state, one_shot, _dataset(seed=1), _cfg(2, iterations=2))
        assert len(calls) == 1

    def test_snapshot_callback_sees_every_iteration(self, phase1_state,
                                                    one_shot):
        state = clone_for_phase2(phase1_state)
        seen = []
        train_phase2(state, one_shot, _dataset(seed=1), _cfg(2, iterations=3),
                     snapshot_callback=lambda s, it: seen.append(it))
        assert seen == [1, 2, 3]

    def test_multi_shot_batch_is_subsampled(self, phase1_state):
        state = clone_for_phase2(phase1_state)
        g = torch.Generator().manual_seed(0)
        many = ImageBatch(torch.rand(20, 3, 32, 32, generator=g) * 2 - 1, "A")
        cfg = _cfg(2, iterations=1, max_a_batch=4)
        train_phase2(state, many, _dataset(seed=1), cfg)
        assert state.iteration == 1


class TestTranslate:
    def test_output_domain_matches_direction(self, phase1_state):
        state = clone_for_phase2(phase1_state)
        g = torch.Generator().manual_seed(1)
        batch = ImageBatch(torch.rand(2, 3, 32, 32, generator=g) * 2 - 1, "A",
                           labels=torch.tensor([3, 7]))
        out = translate(state, batch, "AB")
        assert out.domain == "B"
        assert torch.equal(out.labels, batch.labels)
        assert out.pixels.shape == batch.pixels.shape

    def test_unknown_direction_rejected(self, phase1_state):
        batch = ImageBatch(torch.zeros(1, 3, 32, 32), "A")
        with pytest.raises(ConfigError, match="direction"):
            translate(phase1_state, batch, "AC")

    def test_eval_mode_is_restored(self, phase1_state):
        phase1_state.bundle.train()
        batch = ImageBatch(torch.zeros(1, 3, 32, 32), "B")
        translate(phase1_state, batch, "BB")
        assert phase1_state.bundle.training


class TestCheckpoint:
    def test_roundtrip_restores_forward_bitwise(self, phase1_state, tmp_path):
        path = tmp_path / "state.pt"
        save_checkpoint(phase1_state, path)
        loaded = load_checkpoint(path)
        assert loaded.phase == 1
        assert loaded.iteration == phase1_state.iteration
        batch = ImageBatch(torch.zeros(2, 3, 32, 32), "B")
        a = translate(phase1_state, batch, "BB").pixels
        b = translate(loaded, batch, "BB").pixels
        assert torch.equal(a, b)

    def test_resume_restores_optimizer_and_rng(self, phase1_state, tmp_path):
        path = tmp_path / "state.pt"
        save_checkpoint(phase1_state, path)
        loaded = load_checkpoint(path, cfg=_cfg(iterations=2))
        assert loaded.opt_generator is not None
        assert torch.equal(loaded.rng_noise.get_state(),
                           phase1_state.rng_noise.get_state())

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_checkpoint(tmp_path / "nope.pt")

    def test_corrupt_file_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"not a checkpoint at all")
        with pytest.raises(DataError, match="corrupt"):
            load_checkpoint(bad)

    def test_periodic_checkpoints_written(self, tiny_spec, tmp_path):
        cfg = _cfg(iterations=4, checkpoint_every=2)
        train_phase1(_dataset(), cfg, net_spec=tiny_spec, out_dir=tmp_path)
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert "phase1_final.pt" in names
        assert any("iter0000002" in n for n in names)
        assert any("iter0000004" in n for n in names)


class TestGuards:
    def test_negative_iterations_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(iterations=-1)

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_generator=0.0)

    def test_non_finite_loss_aborts_with_term_name(self, tiny_spec,
                                                   monkeypatch):
        import oneshot_translation.losses as L

        def bad_total(*args, **kwargs):
            nan = torch.tensor(float("nan"))
            return L.LossBreakdown(nan, {"rec_b": nan})

        monkeypatch.setattr(L, "total_phase1", bad_total)
        with pytest.raises(NumericalError, match="rec_b"):
            train_phase1(_dataset(), _cfg(iterations=1), net_spec=tiny_spec,
                         run_audit=False)
