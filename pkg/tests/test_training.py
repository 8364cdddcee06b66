"""Training tests: losses, patch sampling, Adam, the alternating freeze
schedule, and checkpoint round-trips."""

import numpy as np
import pytest

from tricast import model as M
from tricast import training as tr
from tricast.dataset import build_sample
from tricast.tensor import NumericError, Tape, Tensor, check_gradient

# chi-square 99th percentile at 24 degrees of freedom (5x5 candidate grid)
CHI2_CRIT_99_DOF24 = 42.98


def tiny_model_cfg():
    return M.ModelConfig(image_size=16, patch=8, d_embed=16, d_feat=16,
                         n_heads=4, n_layers=2, d_cam=8, plane_res=8,
                         plane_feat=4, low_res=4, nerf_hidden=8, cond_res=16,
                         d_txt=8, d_noise=4, d_style=8, d_lat=8,
                         gen_widths=(4, 8, 8), local_patch=8,
                         n_samples_train=8, n_samples_eval=8)


def tiny_train_cfg(**kw):
    base = dict(side_views=1, lr=1e-3, lr_disc=1e-3, seed=0)
    base.update(kw)
    return tr.TrainConfig(**base)


def tiny_state(seed=0, **kw):
    mcfg = tiny_model_cfg()
    tcfg = tiny_train_cfg(**kw)
    rng = np.random.default_rng(seed)
    return tr.TrainState(params=M.init_model(rng, mcfg),
                         disc=tr.init_discriminator(rng, in_res=8),
                         model_cfg=mcfg, train_cfg=tcfg)


def tiny_sample(seed=0):
    return build_sample(seed=seed, width=16, height=16, n_ring=2,
                        n_random=1)


class TestTrainConfig:
    def test_defaults_valid(self):
        tr.TrainConfig().validate()

    def test_rejections(self):
        with pytest.raises(ValueError, match="w_adv"):
            tr.TrainConfig(w_adv=-0.1).validate()
        with pytest.raises(ValueError, match="learning rates"):
            tr.TrainConfig(lr=0.0).validate()
        with pytest.raises(ValueError, match="schedule"):
            tr.TrainConfig(schedule=(0, 0)).validate()


class TestBranchMask:
    def _groups(self):
        state = tiny_state()
        return state.groups()

    def test_image_branch_flags(self):
        mask = tr.BranchMask.for_branch(self._groups(), "image")
        assert mask.trainable["core"]
        assert mask.trainable["cross_image"]
        assert mask.trainable["image_enc"]
        assert not mask.trainable["cross_cond"]
        assert not mask.trainable["cond_gen"]
        assert not mask.trainable["disc"]

    def test_condition_branch_flags(self):
        mask = tr.BranchMask.for_branch(self._groups(), "condition")
        assert mask.trainable["cross_cond"]
        assert mask.trainable["cond_gen"]
        for g in ("core", "cross_image", "image_enc", "disc"):
            assert not mask.trainable[g]

    def test_partition_exhaustive(self):
        groups = self._groups()
        mask = tr.BranchMask.for_branch(groups, "condition")
        names = set(mask.trainable_names()) | set(mask.frozen_names())
        assert names == set(groups)
        assert not set(mask.trainable_names()) & set(mask.frozen_names())

    def test_unknown_branch(self):
        with pytest.raises(ValueError, match="branch"):
            tr.BranchMask.for_branch(self._groups(), "both")


class TestReconLoss:
    def test_perfect_match_is_zero(self):
        rng = np.random.default_rng(0)
        imgs = [rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
                for _ in range(3)]
        loss = tr.recon_loss([Tensor(i.copy()) for i in imgs[:2]], imgs[:2],
                             aux=Tensor(imgs[2].copy()), aux_truth=imgs[2])
        assert float(loss.data) == 0.0

    def test_zero_perceptual_weight_is_mean_mse(self):
        a = np.zeros((8, 8, 3), np.float32)
        b = np.full((8, 8, 3), 0.5, np.float32)
        loss = tr.recon_loss([Tensor(a), Tensor(b)],
                             [np.full_like(a, 0.1), b], w_perceptual=0.0)
        np.testing.assert_allclose(float(loss.data), (0.01 + 0.0) / 2,
                                   atol=1e-7)

    def test_constant_offset_pyramid(self):
        base = np.random.default_rng(1).uniform(0, 0.5, (16, 16, 3))
        off = tr.pyramid_l2(Tensor(base + 0.25), base)
        np.testing.assert_allclose(float(off.data), 0.25 ** 2, rtol=1e-5)

    def test_view_count_mismatch(self):
        img = np.zeros((8, 8, 3), np.float32)
        with pytest.raises(ValueError, match="renders vs"):
            tr.recon_loss([Tensor(img)], [img, img])
        with pytest.raises(ValueError, match="aux"):
            tr.recon_loss([Tensor(img)], [img], aux=Tensor(img))
        with pytest.raises(ValueError, match="truth"):
            tr.recon_loss([Tensor(img)], [np.zeros((4, 4, 3))])

    def test_custom_perceptual_fn(self):
        calls = []

        def fake_perc(pred, truth):
            calls.append(1)
            return (pred * 0).sum()

        img = np.zeros((8, 8, 3), np.float32)
        tr.recon_loss([Tensor(img)] * 2, [img] * 2, perceptual_fn=fake_perc)
        assert len(calls) == 2

    def test_gradient_check_two_views(self):
        rng = np.random.default_rng(2)
        truths = [rng.uniform(0, 1, (8, 8, 3)) for _ in range(2)]
        aux_t = rng.uniform(0, 1, (8, 8, 3))

        def fn(r0, r1, aux):
            return tr.recon_loss([r0, r1], truths, aux=aux,
                                 aux_truth=aux_t, w_perceptual=0.7)

        xs = [Tensor(rng.uniform(0, 1, (8, 8, 3)), requires_grad=True)
              for _ in range(3)]
        assert check_gradient(fn, xs) <= 1e-4


class TestAdversarial:
    def test_zero_logits_give_ln2(self):
        zero = [Tensor(np.float64(0.0)) for _ in range(3)]
        d = tr.adversarial_bce(zero[:2], zero[2:], "D")
        g = tr.adversarial_bce([], zero, "G")
        np.testing.assert_allclose(float(d.data), np.log(2), atol=1e-7)
        np.testing.assert_allclose(float(g.data), np.log(2), atol=1e-7)

    def test_confident_discriminator_limit(self):
        real = [Tensor(np.float64(40.0))]
        fake = [Tensor(np.float64(-40.0))]
        d = tr.adversarial_bce(real, fake, "D")
        assert float(d.data) < 1e-12

    def test_bad_side(self):
        with pytest.raises(ValueError, match="side"):
            tr.adversarial_bce([], [Tensor(np.float64(0.0))], "Q")

    def test_zero_weight_head_gives_ln2_images(self):
        rng = np.random.default_rng(3)
        disc = tr.init_discriminator(rng, in_res=8)
        disc["head"]["w"] = Tensor(np.zeros_like(disc["head"]["w"].data))
        fakes = [Tensor(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))]
        reals = [rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)]
        d = tr.adversarial_loss(fakes, reals, disc, side="D")
        np.testing.assert_allclose(float(d.data), np.log(2), atol=1e-6)

    def test_g_side_reaches_fakes_d_side_detaches(self):
        rng = np.random.default_rng(4)
        disc = tr.init_discriminator(rng, in_res=8)
        fake = Tensor(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32),
                      requires_grad=True)
        real = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        with Tape() as tape:
            g = tr.adversarial_loss([fake], [real], disc, side="G")
            grads = tape.backward(g)
        assert fake in grads and np.abs(grads[fake]).max() > 0
        with Tape() as tape:
            d = tr.adversarial_loss([fake], [real], disc, side="D")
            grads = tape.backward(d)
        assert fake not in grads
        assert disc["head"]["w"] in grads

    def test_wrong_resolution_rejected(self):
        disc = tr.init_discriminator(np.random.default_rng(5), in_res=8)
        with pytest.raises(ValueError, match="discriminator"):
            tr.adversarial_loss(
                [Tensor(np.zeros((16, 16, 3), np.float32))], [], disc, "G")


class _StubEmbedder:
    def __init__(self, img_vec, txt_vec):
        self.img_vec, self.txt_vec = img_vec, txt_vec

    def embed_image(self, img):
        return Tensor(np.asarray(self.img_vec, np.float64))

    def embed_text(self, prompt):
        return self.txt_vec


class TestClipSlot:
    def test_disabled_slot_is_zero(self):
        assert float(tr.clip_slot_loss([Tensor(np.zeros((4, 4, 3)))],
                                       None).data) == 0.0

    def test_identical_embeddings_zero(self):
        e = _StubEmbedder([1.0, 0.0], [2.0, 0.0])
        loss = tr.clip_slot_loss([Tensor(np.zeros((2, 2, 3)))], None, e)
        np.testing.assert_allclose(float(loss.data), 0.0, atol=1e-9)

    def test_orthogonal_embeddings_one(self):
        e = _StubEmbedder([1.0, 0.0], [0.0, 3.0])
        loss = tr.clip_slot_loss([Tensor(np.zeros((2, 2, 3)))], None, e)
        np.testing.assert_allclose(float(loss.data), 1.0, atol=1e-9)

    def test_width_mismatch(self):
        e = _StubEmbedder([1.0, 0.0, 0.0], [1.0, 0.0])
        with pytest.raises(ValueError, match="width"):
            tr.clip_slot_loss([Tensor(np.zeros((2, 2, 3)))], None, e)


class TestKL:
    def test_standard_normal_is_zero(self):
        stats = type("S", (), {"mu": Tensor(np.zeros(10)),
                               "sigma": Tensor(np.ones(10))})
        np.testing.assert_allclose(float(tr.kl_loss(stats).data), 0.0,
                                   atol=1e-9)

    def test_known_value(self):
        stats = type("S", (), {"mu": Tensor(np.full(4, 1.0)),
                               "sigma": Tensor(np.ones(4))})
        np.testing.assert_allclose(float(tr.kl_loss(stats).data), 0.5,
                                   atol=1e-9)


class TestSampleLocalPatches:
    def test_uniform_when_all_foreground(self):
        rng = np.random.default_rng(0)
        mask = np.ones((8, 8), np.float32)
        hits = np.zeros(25)
        for _ in range(10_000):
            y, x = tr.sample_local_patches(mask, 4, rng)[0]
            hits[y * 5 + x] += 1
        expected = 10_000 / 25
        chi2 = ((hits - expected) ** 2 / expected).sum()
        assert chi2 < CHI2_CRIT_99_DOF24

    def test_quadrant_foreground_attracts_patches(self):
        rng = np.random.default_rng(1)
        mask = np.zeros((16, 16), np.float32)
        mask[:6, :6] = 1.0
        for _ in range(300):
            y, x = tr.sample_local_patches(mask, 4, rng)[0]
            assert y < 6 and x < 6   # window [y,y+4) must touch rows < 6

    def test_degenerate_patch_equals_image(self):
        rng = np.random.default_rng(2)
        corner = tr.sample_local_patches(np.ones((8, 8)), 8, rng)[0]
        np.testing.assert_array_equal(corner, [0, 0])

    def test_empty_mask_uniform_fallback(self):
        rng = np.random.default_rng(3)
        seen = set()
        for _ in range(100):
            y, x = tr.sample_local_patches(np.zeros((8, 8)), 4, rng)[0]
            assert 0 <= y <= 4 and 0 <= x <= 4
            seen.add((int(y), int(x)))
        assert len(seen) > 3

    def test_batch_and_oversize(self):
        rng = np.random.default_rng(4)
        out = tr.sample_local_patches(np.ones((3, 8, 8)), 4, rng)
        assert out.shape == (3, 2)
        with pytest.raises(ValueError, match="exceeds"):
            tr.sample_local_patches(np.ones((8, 8)), 9, rng)


class TestAdam:
    def test_zero_gradient_no_change(self):
        t = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        before = t.data.copy()
        tr.adam_update({"p": t}, {"p": np.zeros(2)}, _fresh_moments(),
                       ["p"], lr=0.1)
        np.testing.assert_array_equal(t.data, before)

    def test_first_step_is_signed_lr(self):
        t = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        tr.adam_update({"p": t}, {"p": np.array([0.5, -0.25])},
                       _fresh_moments(), ["p"], lr=0.01)
        np.testing.assert_allclose(t.data, [1.0 - 0.01, 1.0 + 0.01],
                                   atol=1e-7)

    def test_two_step_hand_trace(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        p, g1, g2 = 0.5, 0.2, -0.1
        m = (1 - b1) * g1
        v = (1 - b2) * g1 * g1
        p1 = p - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        m2 = b1 * m + (1 - b1) * g2
        v2 = b2 * v + (1 - b2) * g2 * g2
        p2 = p1 - lr * (m2 / (1 - b1 ** 2)) / (
            np.sqrt(v2 / (1 - b2 ** 2)) + eps)

        t = Tensor(np.array([0.5]), requires_grad=True)
        moments = _fresh_moments()
        tr.adam_update({"p": t}, {"p": np.array([g1])}, moments, ["p"], lr)
        tr.adam_update({"p": t}, {"p": np.array([g2])}, moments, ["p"], lr)
        np.testing.assert_allclose(t.data, [p2], atol=1e-7)
        assert moments["t"]["p"] == 2

    def test_decoupled_weight_decay(self):
        t = Tensor(np.array([2.0]), requires_grad=True)
        tr.adam_update({"p": t}, {"p": np.zeros(1)}, _fresh_moments(),
                       ["p"], lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(t.data, [2.0 - 0.1 * 0.5 * 2.0],
                                   atol=1e-12)

    def test_missing_gradient_skipped(self):
        t = Tensor(np.array([1.0]), requires_grad=True)
        moments = _fresh_moments()
        tr.adam_update({"p": t}, {}, moments, ["p"], lr=0.1)
        np.testing.assert_array_equal(t.data, [1.0])
        assert "p" not in moments["t"]


def _fresh_moments():
    return {"t": {}, "m": {}, "v": {}}


class TestJointStep:
    def _snapshot(self, state):
        return {n: t.data.copy() for n, t in state.flat().items()}

    def _diff_groups(self, state, before):
        groups = state.groups()
        changed = set()
        for n, t in state.flat().items():
            if not np.array_equal(before[n], t.data):
                changed.add(groups[n])
        return changed

    def test_image_step_freezes_condition_side(self):
        state = tiny_state(0, schedule=(1, 0))
        sample = tiny_sample(0)
        before = self._snapshot(state)
        m = tr.joint_step(state, sample, np.random.default_rng(0))
        assert m["branch"] == "image"
        changed = self._diff_groups(state, before)
        assert "core" in changed
        assert changed <= {"core", "cross_image", "image_enc"}

    def test_condition_step_freezes_decoder_trunk(self):
        state = tiny_state(1, schedule=(0, 1))
        sample = tiny_sample(1)
        before = self._snapshot(state)
        m = tr.joint_step(state, sample, np.random.default_rng(1))
        assert m["branch"] == "condition"
        changed = self._diff_groups(state, before)
        assert "cond_gen" in changed and "cross_cond" in changed
        assert "disc" in changed
        assert changed <= {"cond_gen", "cross_cond", "disc"}

    def test_alternation_order(self):
        state = tiny_state(2)
        sample = tiny_sample(2)
        rng = np.random.default_rng(2)
        branches = [tr.joint_step(state, sample, rng)["branch"]
                    for _ in range(4)]
        assert branches == ["image", "condition", "image", "condition"]

    def test_deterministic_trace(self):
        metrics = []
        for _ in range(2):
            state = tiny_state(3)
            sample = tiny_sample(3)
            rng = np.random.default_rng(3)
            metrics.append([tr.joint_step(state, sample, rng)["total"]
                            for _ in range(4)])
        assert metrics[0] == metrics[1]

    def test_loss_composition_without_extras(self):
        state = tiny_state(4, w_adv=0.0, w_clip=0.0, w_kl=0.0,
                           schedule=(0, 1))
        m = tr.joint_step(state, tiny_sample(4), np.random.default_rng(4))
        assert m["total"] == m["recon"]
        assert m["adv_g"] == 0.0 and m["adv_d"] == 0.0

    def test_kl_term_counts_when_enabled(self):
        state = tiny_state(5, w_kl=0.1, schedule=(0, 1))
        m = tr.joint_step(state, tiny_sample(5), np.random.default_rng(5))
        assert m["kl"] > 0.0
        np.testing.assert_allclose(
            m["total"], m["recon"] + 0.5 * m["adv_g"] + 0.1 * m["kl"],
            rtol=1e-5)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts_with_diagnostics(self):
        state = tiny_state(6)
        state.params["nerf"]["w0"].data[0, 0] = np.nan
        with pytest.raises(NumericError):
            tr.joint_step(state, tiny_sample(6), np.random.default_rng(6))

    def test_one_scene_loss_decreases(self):
        state = tiny_state(7, schedule=(1, 0), lr=3e-3)
        sample = tiny_sample(7)
        rng = np.random.default_rng(7)
        losses = [tr.joint_step(state, sample, rng)["total"]
                  for _ in range(100)]
        assert np.mean(losses[-20:]) < 0.6 * np.mean(losses[:20])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        state = tiny_state(8)
        sample = tiny_sample(8)
        rng = np.random.default_rng(8)
        tr.joint_step(state, sample, rng)
        tr.joint_step(state, sample, rng)
        path = str(tmp_path / "ck.bin")
        tr.save_checkpoint(path, state)

        other = tiny_state(99)   # different init
        ckpt = tr.load_checkpoint(path)
        tr.restore_checkpoint(ckpt, other)
        assert other.step == state.step
        for n, t in state.flat().items():
            np.testing.assert_array_equal(t.data, other.flat()[n].data)
        for n, m in state.moments["m"].items():
            np.testing.assert_array_equal(m, other.moments["m"][n])
        assert state.moments["t"] == other.moments["t"]

    def test_restored_state_renders_identically(self, tmp_path):
        state = tiny_state(9)
        tr.joint_step(state, tiny_sample(9), np.random.default_rng(9))
        path = str(tmp_path / "ck.bin")
        tr.save_checkpoint(path, state)
        other = tiny_state(100)
        tr.restore_checkpoint(tr.load_checkpoint(path), other)

        sample = tiny_sample(9)
        mod, ren = M.prepare_poses([v.pose for v in sample.views], 0)
        img = sample.views[0].rgb
        a = M.image_branch(state.params, state.model_cfg, img, mod[0])
        b = M.image_branch(other.params, other.model_cfg, img, mod[0])
        out_a = M.render_view(a.triplane, state.params["nerf"], ren[1], 16,
                              n_samples=8)
        out_b = M.render_view(b.triplane, other.params["nerf"], ren[1], 16,
                              n_samples=8)
        np.testing.assert_array_equal(out_a.rgb.data, out_b.rgb.data)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            tr.load_checkpoint(str(p))

    def test_bad_version(self, tmp_path):
        state = tiny_state(10)
        path = tmp_path / "ck.bin"
        tr.save_checkpoint(str(path), state)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (77).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            tr.load_checkpoint(str(path))

    def test_truncated_file(self, tmp_path):
        state = tiny_state(11)
        path = tmp_path / "ck.bin"
        tr.save_checkpoint(str(path), state)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(ValueError, match="truncated"):
            tr.load_checkpoint(str(path))

    def test_shape_mismatch_names_tensor(self, tmp_path):
        state = tiny_state(12)
        path = str(tmp_path / "ck.bin")
        tr.save_checkpoint(path, state)
        ckpt = tr.load_checkpoint(path)
        ckpt.tensors["nerf/w0"] = np.zeros((2, 2), np.float32)
        other = tiny_state(12)
        with pytest.raises(ValueError, match="nerf/w0"):
            tr.restore_checkpoint(ckpt, other)

    def test_missing_tensor_named(self, tmp_path):
        state = tiny_state(13)
        path = str(tmp_path / "ck.bin")
        tr.save_checkpoint(path, state)
        ckpt = tr.load_checkpoint(path)
        del ckpt.tensors["decoder/f_in"]
        with pytest.raises(ValueError, match="decoder/f_in"):
            tr.restore_checkpoint(ckpt, tiny_state(13))
