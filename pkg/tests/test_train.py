import numpy as np
import pytest

from copydet import (
    TIERS,
    EmptyBatch,
    Encoder,
    FormatError,
    LossConfig,
    MemoryBank,
    ShapeMismatch,
    StageConfig,
    augment_vector,
    contrastive_loss,
    encoder_loss_and_grads,
    gen_world,
    make_positive_pair,
    run_stage,
    sgd_momentum_step,
    substream,
)


def unit_rows(rng, count, dim):
    m = rng.standard_normal((count, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def pair_at_distance(d):
    """Two unit 2-d vectors at Euclidean distance d (0 < d < 2)."""
    cos = 1.0 - d * d / 2.0
    return np.array([[1.0, 0.0], [cos, np.sqrt(1.0 - cos * cos)]])


def loss_value(encoder, x, labels, bank, cfg):
    loss, _ = contrastive_loss(encoder.forward(x), labels, bank, cfg)
    return loss


def fd_param_grads(encoder, x, labels, bank, cfg, h=1e-5):
    """Central finite differences of the loss over every encoder parameter."""
    grads = []
    for p in encoder.params():
        g = np.zeros_like(p)
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss_value(encoder, x, labels, bank, cfg)
            flat_p[i] = orig - h
            down = loss_value(encoder, x, labels, bank, cfg)
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, fd, rtol=1e-4, floor=1e-8):
    for a, f in zip(analytic, fd):
        mask = np.abs(a) > floor
        if not np.any(mask):
            continue
        rel = np.abs(a - f) / np.maximum(np.abs(a), np.abs(f))
        assert rel[mask].max() < rtol, f"worst relative error {rel[mask].max():.3e}"


class TestContrastiveLoss:
    def test_single_positive_pair(self):
        emb = pair_at_distance(0.5)
        loss, _ = contrastive_loss(emb, np.array([1, 1]), None, LossConfig())
        np.testing.assert_allclose(loss, 0.5, atol=1e-12)

    def test_inactive_negative_pair(self):
        emb = pair_at_distance(1.2)
        loss, grad = contrastive_loss(emb, np.array([1, 2]), None, LossConfig())
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(emb))

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            contrastive_loss(np.empty((0, 4)), np.empty(0), None, LossConfig())

    def test_single_item_empty_bank_zero_pairs(self):
        loss, grad = contrastive_loss(np.array([[1.0, 0.0]]), np.array([1]), None, LossConfig())
        assert loss == 0.0 and not grad.any()

    def test_loss_floor(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            emb = unit_rows(rng, 6, 4)
            labels = rng.integers(0, 3, size=6)
            loss, _ = contrastive_loss(emb, labels, None, LossConfig())
            assert loss >= 0.0

    def test_exact_zero_when_all_hinges_satisfied(self):
        # Orthogonal different-label rows sit at distance sqrt(2) > 1.
        emb = np.eye(4)
        loss, grad = contrastive_loss(emb, np.arange(4), None, LossConfig())
        assert loss == 0.0 and not grad.any()

    def test_bank_pairs_counted(self):
        # One batch item against a two-entry bank, no in-batch pairs.
        bank = MemoryBank(8, 2)
        bank.push(pair_at_distance(0.5), np.array([7, 8]))
        emb = pair_at_distance(0.5)[:1]
        loss, _ = contrastive_loss(emb, np.array([7]), bank, LossConfig())
        # Pair with label 7 at distance 0, pair with label 8 at distance 0.5.
        np.testing.assert_allclose(loss, (0.0 + max(0.0, 1.0 - 0.5)) / 2.0, atol=1e-9)

    def test_descriptor_gradients_match_fd(self):
        rng = np.random.default_rng(42)
        cfg = LossConfig()
        for _ in range(10):
            emb = unit_rows(rng, 6, 5)
            labels = rng.integers(0, 3, size=6)
            bank = MemoryBank(16, 5)
            bank.push(unit_rows(rng, 8, 5), rng.integers(0, 3, size=8))
            _, grad = contrastive_loss(emb, labels, bank, cfg)

            fd = np.zeros_like(emb)
            h = 1e-6
            for i in range(emb.shape[0]):
                for j in range(emb.shape[1]):
                    probe = emb.copy()
                    probe[i, j] += h
                    up, _ = contrastive_loss(probe, labels, bank, cfg)
                    probe[i, j] -= 2 * h
                    down, _ = contrastive_loss(probe, labels, bank, cfg)
                    fd[i, j] = (up - down) / (2 * h)
            assert_grads_close([grad], [fd])


class TestMemoryBank:
    def test_fifo_eviction(self):
        bank = MemoryBank(3, 2)
        rows = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], dtype=float)
        bank.push(rows, np.array([0, 1, 2, 3]))
        emb, labels = bank.contents()
        np.testing.assert_array_equal(labels, [1, 2, 3])
        np.testing.assert_array_equal(emb, rows[1:])

    def test_under_capacity_kept_in_order(self):
        bank = MemoryBank(10, 2)
        rows = np.array([[1, 0], [0, 1]], dtype=float)
        bank.push(rows, np.array([5, 6]))
        emb, labels = bank.contents()
        np.testing.assert_array_equal(labels, [5, 6])
        np.testing.assert_array_equal(emb, rows)
        assert len(bank) == 2

    def test_interleaved_ops_match_ring_oracle(self):
        rng = np.random.default_rng(7)
        capacity = 17
        bank = MemoryBank(capacity, 3)
        oracle: list[tuple[np.ndarray, int]] = []
        next_label = 0
        for _ in range(100):
            size = int(rng.integers(1, 8))
            rows = unit_rows(rng, size, 3)
            labels = np.arange(next_label, next_label + size)
            next_label += size
            bank.push(rows, labels)
            for r, l in zip(rows, labels):
                oracle.append((r, int(l)))
            oracle = oracle[-capacity:]

            emb, labs = bank.contents()
            np.testing.assert_array_equal(labs, [l for _, l in oracle])
            np.testing.assert_array_equal(emb, np.stack([r for r, _ in oracle]))

    def test_push_shape_mismatch(self):
        bank = MemoryBank(4, 3)
        with pytest.raises(ShapeMismatch):
            bank.push(np.zeros((2, 5)), np.array([0, 1]))

    def test_bank_detached_from_gradients(self):
        # Perturbing a bank entry changes the loss value but the batch
        # parameter gradients still match finite differences.
        rng = np.random.default_rng(3)
        encoder = Encoder.init(6, 4, rng=rng)
        x = rng.standard_normal((5, 6))
        labels = rng.integers(0, 3, size=5)
        cfg = LossConfig()

        bank = MemoryBank(8, 4)
        bank_rows = unit_rows(rng, 4, 4)
        bank.push(bank_rows, np.array([0, 1, 2, 0]))
        loss_a, grads_a, _ = encoder_loss_and_grads(encoder, x, labels, bank, cfg)
        assert_grads_close(grads_a, fd_param_grads(encoder, x, labels, bank, cfg))

        bank2 = MemoryBank(8, 4)
        perturbed = bank_rows.copy()
        perturbed[0] = unit_rows(rng, 1, 4)[0]
        bank2.push(perturbed, np.array([0, 1, 2, 0]))
        loss_b, grads_b, _ = encoder_loss_and_grads(encoder, x, labels, bank2, cfg)
        assert loss_a != loss_b
        assert_grads_close(grads_b, fd_param_grads(encoder, x, labels, bank2, cfg))


class TestSgdMomentum:
    def test_first_step(self):
        p = [np.array([1.0])]
        state = sgd_momentum_step(p, [np.array([1.0])], None, lr=0.1)
        np.testing.assert_allclose(p[0], [0.9])
        np.testing.assert_allclose(state[0], [1.0])

    def test_two_steps_accumulate(self):
        p = [np.array([1.0])]
        g = [np.array([1.0])]
        state = sgd_momentum_step(p, g, None, lr=0.1, momentum=0.9)
        state = sgd_momentum_step(p, g, state, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(p[0], [1.0 - 0.29], atol=1e-15)

    def test_zero_momentum_is_vanilla_sgd(self):
        p = [np.array([2.0, -1.0])]
        g = [np.array([0.5, 0.25])]
        state = None
        for _ in range(3):
            state = sgd_momentum_step(p, g, state, lr=0.1, momentum=0.0)
        np.testing.assert_allclose(p[0], [2.0 - 3 * 0.05, -1.0 - 3 * 0.025], atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            sgd_momentum_step([np.zeros(2)], [np.zeros(3)], None, lr=0.1)


class TestEncoder:
    def test_forward_unit_norm(self):
        rng = np.random.default_rng(4)
        for hidden in (0, 8):
            enc = Encoder.init(12, 6, hidden=hidden, rng=rng)
            x = rng.standard_normal((200, 12))
            out = enc.forward(x)
            np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        for hidden in (0, 5):
            enc = Encoder.init(7, 3, hidden=hidden, rng=rng)
            path = tmp_path / f"enc{hidden}.bin"
            enc.save(path)
            back = Encoder.load(path)
            x = rng.standard_normal((4, 7))
            # f32 checkpoint quantization only.
            np.testing.assert_allclose(back.forward(x), enc.forward(x), atol=1e-5)

    def test_checkpoint_save_load_idempotent(self, tmp_path):
        rng = np.random.default_rng(6)
        enc = Encoder.init(4, 3, rng=rng)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        enc.save(p1)
        Encoder.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError):
            Encoder.load(path)

    def test_load_rejects_truncation(self, tmp_path):
        rng = np.random.default_rng(7)
        enc = Encoder.init(4, 3, rng=rng)
        path = tmp_path / "trunc.bin"
        enc.save(path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError):
            Encoder.load(path)


class TestEncoderGradients:
    def test_matches_fd_across_configs(self):
        rng = np.random.default_rng(42)
        for trial in range(8):
            hidden = 5 if trial % 2 else 0
            enc = Encoder.init(6, 4, hidden=hidden, rng=rng)
            x = rng.standard_normal((6, 6))
            labels = rng.integers(0, 3, size=6)
            bank = None
            if trial % 3 == 0:
                bank = MemoryBank(12, 4)
                bank.push(unit_rows(rng, 5, 4), rng.integers(0, 3, size=5))
            # Mix of margins exercises active and inactive hinges.
            cfg = LossConfig(pos_margin=0.0 if trial % 2 else 0.1, neg_margin=1.0 + 0.2 * (trial % 3))
            _, grads, _ = encoder_loss_and_grads(enc, x, labels, bank, cfg)
            assert_grads_close(grads, fd_param_grads(enc, x, labels, bank, cfg))


class TestMakePositivePair:
    def test_tier_none_identity(self):
        src = np.arange(8, dtype=float)
        a, b = make_positive_pair(src, TIERS["none"], np.random.default_rng(0))
        np.testing.assert_array_equal(a, src)
        np.testing.assert_array_equal(b, src)

    def test_seeded_determinism(self):
        src = np.arange(8, dtype=float)
        a1, b1 = make_positive_pair(src, TIERS["strong"], np.random.default_rng(5))
        a2, b2 = make_positive_pair(src, TIERS["strong"], np.random.default_rng(5))
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(b1, b2)

    def test_strong_view_matches_shared_transform(self):
        src = np.arange(8, dtype=float)
        rng = np.random.default_rng(9)
        a, b = make_positive_pair(src, TIERS["strong"], rng)
        oracle_rng = np.random.default_rng(9)
        np.testing.assert_array_equal(a, augment_vector(src, TIERS["strong"], oracle_rng))
        np.testing.assert_array_equal(b, augment_vector(src, TIERS["weak"], oracle_rng))


class TestRunStage:
    def _world(self):
        return gen_world(seed=21, n_train=64, n_ref=64, n_query=16, d_in=8, copy_rate=0.5)

    def test_zero_epochs_unchanged(self):
        world = self._world()
        enc = Encoder.init(8, 4, rng=substream(0, "train"))
        before = [p.copy() for p in enc.params()]
        bank = MemoryBank(64, 4)
        run_stage(enc, world, StageConfig(index=1, tier="weak", epochs=0), bank, substream(0, "train"))
        for b, p in zip(before, enc.params()):
            np.testing.assert_array_equal(b, p)

    def test_seeded_run_reproducible(self):
        world = self._world()

        def run():
            rng = substream(3, "train")
            enc = Encoder.init(8, 4, rng=rng)
            bank = MemoryBank(64, 4)
            _, metrics = run_stage(
                enc, world, StageConfig(index=1, tier="weak", epochs=1, lr=0.1), bank, rng
            )
            return enc, metrics

        enc_a, metrics_a = run()
        enc_b, metrics_b = run()
        assert metrics_a == metrics_b
        for pa, pb in zip(enc_a.params(), enc_b.params()):
            np.testing.assert_array_equal(pa, pb)

    def test_bank_fills_during_stage(self):
        world = self._world()
        rng = substream(4, "train")
        enc = Encoder.init(8, 4, rng=rng)
        bank = MemoryBank(2048, 4)
        run_stage(enc, world, StageConfig(index=1, tier="weak", epochs=1), bank, rng)
        assert len(bank) == 2 * 64  # two views per training item

    def test_stage_flags_add_rows(self):
        world = self._world()
        rng = substream(5, "train")
        enc = Encoder.init(8, 4, rng=rng)
        bank = MemoryBank(4096, 4)
        stage = StageConfig(
            index=4, tier="none", include_reference_negatives=True,
            include_gt_positives=True, epochs=1, batch_size=16,
            ref_per_batch=4, gt_per_batch=2,
        )
        run_stage(enc, world, stage, bank, rng)
        # 4 batches of 32 views + 4 refs + 2*2 gt rows each.
        assert len(bank) == 4 * (32 + 4 + 4)
