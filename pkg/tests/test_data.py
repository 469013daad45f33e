"""Interaction/embedding file formats, synthetic generator, splits."""

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from esans.data import (
    EmbeddingTable,
    SyntheticSpec,
    generate_synthetic,
    load_embedding_table,
    load_interactions,
    split_train_eval,
    write_embedding_table,
    write_interactions,
)
from esans.errors import (
    EmptyDataset,
    InvalidSpec,
    MagicMismatch,
    ManifestMismatch,
    ParseError,
    TruncatedFile,
)
from esans.tensor import kmeans, normalized_sim


class TestInteractionIO:
    def test_sorted_by_timestamp(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("u1\ti1\t10\nu1\ti2\t5\n")
        log = load_interactions(p)
        assert [it.item_id for it in log.user_sequences["u1"]] == ["i2", "i1"]
        assert log.items == ["i1", "i2"]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("")
        with pytest.raises(EmptyDataset):
            load_interactions(p)

    def test_bad_timestamp_reports_line(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("u1\ti1\t10\nu1\ti2\tnope\n")
        with pytest.raises(ParseError) as err:
            load_interactions(p)
        assert err.value.line == 2

    def test_wrong_field_count(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("u1\ti1\n")
        with pytest.raises(ParseError):
            load_interactions(p)

    def test_round_trip(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("u1\ti1\t10\nu2\ti2\t5\n")
        log = load_interactions(p)
        q = tmp_path / "y.tsv"
        write_interactions(log, q)
        assert q.read_text() == p.read_text()


class TestEmbeddingIO:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        table = EmbeddingTable(
            ["a", "b", "c"], rng.normal(size=(3, 4)).astype(np.float32).astype(np.float64), "image"
        )
        path = tmp_path / "t.emb"
        write_embedding_table(table, path)
        loaded = load_embedding_table(path, "image")
        assert loaded.item_order == table.item_order
        assert np.array_equal(loaded.matrix, table.matrix)

    def test_truncated(self, tmp_path):
        table = EmbeddingTable(["a", "b", "c"], np.ones((3, 4)), "image")
        path = tmp_path / "t.emb"
        write_embedding_table(table, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(TruncatedFile):
            load_embedding_table(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.emb"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(MagicMismatch):
            load_embedding_table(path)

    def test_manifest_mismatch(self, tmp_path):
        table = EmbeddingTable(["a", "b"], np.ones((2, 2)), "text")
        path = tmp_path / "t.emb"
        write_embedding_table(table, path)
        (tmp_path / "t.emb.ids").write_text("a\n")
        with pytest.raises(ManifestMismatch):
            load_embedding_table(path)


class TestSyntheticGenerator:
    def test_zero_noise_groups_identical(self):
        spec = SyntheticSpec(
            num_users=10, num_items=40, num_groups=4, intra_group_noise=0.0, seed=3
        )
        ds = generate_synthetic(spec)
        groups = ds.groups
        by_group = {}
        for item in ds.image.item_order:
            by_group.setdefault(groups[item], []).append(item)
        for members in by_group.values():
            base = ds.image.row(members[0])
            for m in members[1:]:
                assert np.array_equal(ds.image.row(m), base)
        # cross-group similarity strictly below within-group
        a, b = by_group[0][0], by_group[0][1]
        c = by_group[1][0]
        within = normalized_sim(ds.text.row(a), ds.text.row(b))
        cross = normalized_sim(ds.text.row(a), ds.text.row(c))
        assert within > cross

    def test_deterministic(self):
        spec = SyntheticSpec(num_users=8, num_items=30, num_groups=3, seed=11)
        d1, d2 = generate_synthetic(spec), generate_synthetic(spec)
        assert d1.log.interactions == d2.log.interactions
        assert np.array_equal(d1.image.matrix, d2.image.matrix)
        assert np.array_equal(d1.behavior.matrix, d2.behavior.matrix)

    def test_kmeans_recovers_planting(self):
        # oracle for the noise scale: clustering the true embeddings at the
        # planted K must recover the partition almost perfectly
        spec = SyntheticSpec(
            num_users=5, num_items=1000, num_groups=20, intra_group_noise=0.1, seed=5
        )
        ds = generate_synthetic(spec)
        fused = np.hstack([ds.image.matrix, ds.text.matrix, ds.behavior.matrix])
        res = kmeans(fused, 20, restarts=5, rng=np.random.default_rng(0))
        truth = [ds.groups[i] for i in ds.image.item_order]
        assert adjusted_rand_score(truth, res.assignments) >= 0.95

    def test_invalid_spec(self):
        with pytest.raises(InvalidSpec):
            generate_synthetic(SyntheticSpec(num_users=1, num_items=2, num_groups=5))


class TestSplit:
    def test_leave_last_out(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("".join(f"u1\ti{k}\t{k * 10}\n" for k in range(5)))
        log = load_interactions(p)
        train, eval_pairs = split_train_eval(log, 1)
        assert len(train.user_sequences["u1"]) == 4
        assert eval_pairs == {"u1": ["i4"]}

    def test_short_user_excluded(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("u1\ti1\t1\nu2\ti1\t1\nu2\ti2\t2\n")
        log = load_interactions(p)
        train, eval_pairs = split_train_eval(log, 1)
        assert "u1" not in eval_pairs
        assert "u1" in train.user_sequences
        assert eval_pairs == {"u2": ["i2"]}

    def test_counts_on_generated_log(self):
        spec = SyntheticSpec(num_users=100, num_items=50, num_groups=5, seed=1)
        ds = generate_synthetic(spec)
        train, eval_pairs = split_train_eval(ds.log, 2)
        eligible = sum(1 for u in ds.log.user_sequences.values() if len(u) >= 3)
        assert sum(len(v) for v in eval_pairs.values()) == 2 * eligible

    def test_disjoint(self):
        spec = SyntheticSpec(num_users=30, num_items=40, num_groups=4, seed=2)
        ds = generate_synthetic(spec)
        train, eval_pairs = split_train_eval(ds.log, 1)
        train_triples = {(it.user_id, it.item_id, it.timestamp) for it in train.interactions}
        for user, items in eval_pairs.items():
            held = [
                it
                for it in ds.log.user_sequences[user]
                if it.item_id in items and (it.user_id, it.item_id, it.timestamp) in train_triples
            ]
            last = ds.log.user_sequences[user][-1]
            assert (last.user_id, last.item_id, last.timestamp) not in train_triples
