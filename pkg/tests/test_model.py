"""Two-tower model, InfoNCE, and the training loop's negative accounting."""

import math

import numpy as np
import pytest
import torch

from esans.data import Interaction, InteractionLog
from esans.edis import InterpolationConfig
from esans.errors import DimMismatch, InvalidSpec, UnknownId
from esans.model import (
    EbrCheckpoint,
    EbrConfig,
    TrainExample,
    TwoTowerModel,
    UserFeatures,
    assign_user_buckets,
    build_examples,
    encode_item,
    encode_user,
    infonce_loss,
    popularity_counts,
    score,
    train_ebr,
)
from esans.sampler import SamplerConfig
from esans.tensor import grad_check


def _log(rows):
    return InteractionLog.from_interactions([Interaction(*r) for r in rows])


def _small_config(**kw):
    base = dict(
        epochs=1,
        batch_size=8,
        embed_dim=8,
        hidden_dim=12,
        output_dim=8,
        sampler=SamplerConfig(clusters_per_positive=2, samples_per_cluster=3, hard_per_positive=2),
        interpolation=InterpolationConfig(),
    )
    base.update(kw)
    return EbrConfig(**base)


class TestInfoNCE:
    def test_matches_closed_form(self):
        # one example, one negative: loss = log(1 + exp((s_n - s_p)/tau))
        u = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        pos = torch.tensor([[2.0, 0.0]], dtype=torch.float64)
        neg = [torch.tensor([[0.5, 0.0]], dtype=torch.float64)]
        tau = 0.5
        got = float(infonce_loss(u, pos, neg, tau))
        s_p, s_n = 2.0 / tau, 0.5 / tau
        assert got == pytest.approx(math.log(1 + math.exp(s_n - s_p)), rel=1e-12)

    def test_mean_over_examples(self):
        u = torch.tensor([[1.0], [1.0]], dtype=torch.float64)
        pos = torch.tensor([[1.0], [1.0]], dtype=torch.float64)
        negs = [torch.tensor([[0.0]], dtype=torch.float64), torch.tensor([[2.0]], dtype=torch.float64)]
        got = float(infonce_loss(u, pos, negs, 1.0))
        l1 = math.log(1 + math.exp(-1.0))
        l2 = math.log(1 + math.exp(1.0))
        assert got == pytest.approx((l1 + l2) / 2, rel=1e-12)

    def test_huge_scores_stay_finite(self):
        u = torch.tensor([[1000.0]])
        pos = torch.tensor([[1000.0]])
        negs = [torch.tensor([[-1000.0]])]
        assert math.isfinite(float(infonce_loss(u, pos, negs, 0.05)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        u0 = rng.normal(size=(3, 4))
        pos = torch.tensor(rng.normal(size=(3, 4)))
        negs = [torch.tensor(rng.normal(size=(5, 4))) for _ in range(3)]

        def loss_and_grad(flat):
            u = torch.tensor(flat.reshape(3, 4), requires_grad=True)
            loss = infonce_loss(u, pos, negs, 0.1)
            loss.backward()
            return float(loss.detach()), u.grad.numpy().ravel()

        assert grad_check(loss_and_grad, u0.ravel()) < 1e-6

    def test_invalid_tau(self):
        u = torch.ones((1, 2))
        with pytest.raises(InvalidSpec):
            infonce_loss(u, u, [u], 0.0)


class TestTowers:
    def test_shapes(self):
        cfg = _small_config()
        model = TwoTowerModel(10, cfg.profile_buckets, cfg)
        items = model.encode_items(torch.tensor([0, 3, 7]))
        assert items.shape == (3, cfg.output_dim)
        users = model.encode_users(
            torch.tensor([[1, 2, 0]]), torch.tensor([[1.0, 1.0, 0.0]]), torch.tensor([0])
        )
        assert users.shape == (1, cfg.output_dim)

    def test_mask_is_respected(self):
        cfg = _small_config()
        model = TwoTowerModel(10, cfg.profile_buckets, cfg)
        # same valid prefix, different padding content: identical encodings
        a = model.encode_users(
            torch.tensor([[1, 2, 5]]), torch.tensor([[1.0, 1.0, 0.0]]), torch.tensor([0])
        )
        b = model.encode_users(
            torch.tensor([[1, 2, 9]]), torch.tensor([[1.0, 1.0, 0.0]]), torch.tensor([0])
        )
        np.testing.assert_allclose(a.detach(), b.detach())

    def test_score_is_dot_product(self):
        assert score([1.0, 2.0], [3.0, 4.0]) == pytest.approx(11.0)
        with pytest.raises(DimMismatch):
            score([1.0], [1.0, 2.0])


class TestExampleBuilding:
    def test_history_prefixes(self):
        log = _log([("u", "a", 0), ("u", "b", 10), ("u", "c", 20)])
        examples = build_examples(log, max_seq_len=10)
        assert examples == [
            TrainExample("u", (), "a"),
            TrainExample("u", ("a",), "b"),
            TrainExample("u", ("a", "b"), "c"),
        ]

    def test_history_capped(self):
        log = _log([("u", f"i{t}", t) for t in range(6)])
        examples = build_examples(log, max_seq_len=2)
        assert examples[-1].history == ("i3", "i4")

    def test_bucket_assignment_stable(self):
        log = _log([("b", "x", 0), ("a", "x", 0), ("c", "x", 0)])
        assert assign_user_buckets(log, 2) == {"a": 0, "b": 1, "c": 0}

    def test_popularity_counts(self):
        log = _log([("u1", "a", 0), ("u2", "a", 0), ("u1", "b", 1)])
        np.testing.assert_array_equal(popularity_counts(log, ["a", "b", "c"]), [2, 1, 0])


class TestTraining:
    def test_esans_requires_index(self, small_dataset):
        with pytest.raises(InvalidSpec):
            train_ebr(small_dataset.log, None, _small_config())

    def test_esans_training_reduces_loss(self, small_dataset, small_index):
        cfg = _small_config(epochs=3, seed=1)
        ckpt = train_ebr(small_dataset.log, small_index, cfg)
        assert len(ckpt.epoch_losses) == 3
        assert ckpt.epoch_losses[-1] < ckpt.epoch_losses[0]

    def test_baselines_train_without_index(self, small_dataset):
        for mode in ("uns", "pns"):
            cfg = _small_config(negative_mode=mode, uniform_negatives=5)
            ckpt = train_ebr(small_dataset.log, None, cfg)
            assert math.isfinite(ckpt.epoch_losses[0])

    def test_deterministic(self, small_dataset, small_index):
        cfg = _small_config(seed=4)
        c1 = train_ebr(small_dataset.log, small_index, cfg)
        c2 = train_ebr(small_dataset.log, small_index, cfg)
        np.testing.assert_array_equal(c1.encode_all_items(), c2.encode_all_items())
        assert c1.epoch_losses == c2.epoch_losses

    def test_vocab_comes_from_index(self, small_dataset, small_index):
        ckpt = train_ebr(small_dataset.log, small_index, _small_config())
        assert ckpt.item_vocab == small_index.item_order

    def test_index_must_cover_log(self, small_index):
        log = _log([("u", "not-an-item", 0), ("u", "also-missing", 1)])
        with pytest.raises(InvalidSpec):
            train_ebr(log, small_index, _small_config())

    def test_ablation_flags_run(self, small_dataset, small_index):
        for kw in (
            {"use_simple_virtuals": False},
            {"use_hard_virtuals": False},
            {"use_hard_negatives": False, "use_hard_virtuals": False},
        ):
            ckpt = train_ebr(small_dataset.log, small_index, _small_config(**kw))
            assert math.isfinite(ckpt.epoch_losses[0])


@pytest.fixture(scope="module")
def checkpoint(small_dataset, small_index):
    return train_ebr(small_dataset.log, small_index, _small_config())


class TestEncoding:
    def test_encode_item_matches_bulk(self, checkpoint):
        item = checkpoint.item_vocab[3]
        np.testing.assert_allclose(
            encode_item(item, checkpoint), checkpoint.encode_all_items()[3]
        )

    def test_unknown_item(self, checkpoint):
        with pytest.raises(UnknownId):
            encode_item("nope", checkpoint)

    def test_encode_user_uses_recent_history(self, checkpoint):
        vocab = checkpoint.item_vocab
        cap = checkpoint.config.max_seq_len
        long_hist = vocab[: cap + 5]
        a = encode_user(UserFeatures(long_hist, 0), checkpoint)
        b = encode_user(UserFeatures(long_hist[-cap:], 0), checkpoint)
        np.testing.assert_allclose(a, b)

    def test_empty_history_works(self, checkpoint):
        u = encode_user(UserFeatures([], 0), checkpoint)
        assert u.shape == (checkpoint.config.output_dim,)
        assert np.isfinite(u).all()

    def test_bad_profile_bucket(self, checkpoint):
        with pytest.raises(UnknownId):
            encode_user(UserFeatures([], 999), checkpoint)
