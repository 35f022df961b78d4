"""Training loops: determinism, ablation wiring, loss composition."""
import dataclasses
import json

import numpy as np
import pytest

from remex.autodiff import ops
from remex.config import desk_config
from remex.data import InitialEmbeddings, SentenceBag
from remex.errors import AvailabilityError, DataError, NumericError
from remex.losses import bce_loss, remap_b_loss, remap_m_loss, \
    softmax_normalize
from remex.scoring import shared_relations
from remex.seeding import stable_seed
from remex.synthetic import build_world
from remex.training import (CotrainedModel, MetricsWriter, TrainData,
                            build_graph_model, build_text_model, cotrain,
                            graph_training_pairs, init_node_matrix,
                            load_model, predict, pretrain_graph,
                            pretrain_text, save_model, score_bags_eval,
                            score_pairs_eval, split_items)


@pytest.fixture(scope="module")
def world():
    return build_world(n_entities=40, K=3, d=8, density=0.04, seed=11,
                       noise_rate=0.0, d_hi=16)


@pytest.fixture(scope="module")
def data(world):
    return TrainData.from_world(world)


def make_config(seed=3, **train_overrides):
    cfg = desk_config(seed=seed)
    cfg.dims.d_hi = 16
    cfg.text.epochs = 1
    cfg.graph.epochs = 2
    cfg.train.cotrain_epochs = 1
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    return cfg.validate()


class TestSplits:
    def test_partition_covers_everything(self):
        items = list(range(100))
        train, valid, test = split_items(items, 0.2, 0.1, seed=5)
        assert len(test) == 10 and len(valid) == 20 and len(train) == 70
        assert sorted(train + valid + test) == items

    def test_deterministic(self):
        items = list(range(57))
        a = split_items(items, 0.15, 0.15, seed=9)
        b = split_items(items, 0.15, 0.15, seed=9)
        assert a == b
        c = split_items(items, 0.15, 0.15, seed=10)
        assert a != c

    def test_order_preserved_within_splits(self):
        train, _, _ = split_items(list(range(50)), 0.2, 0.2, seed=1)
        assert train == sorted(train)


class TestMetricsWriter:
    def test_jsonl_lines_sorted_keys(self, tmp_path):
        path = tmp_path / "m.jsonl"
        with MetricsWriter(path) as mw:
            mw.write({"b": 1, "a": 2})
            mw.write({"x": 0.5})
        lines = path.read_text().splitlines()
        assert lines[0] == '{"a": 2, "b": 1}'
        assert json.loads(lines[1]) == {"x": 0.5}


class TestPretrainText:
    def test_zero_epochs_leaves_init_untouched(self, data):
        cfg = make_config()
        cfg.text.epochs = 0
        model = pretrain_text(data, cfg)
        fresh = build_text_model(cfg, data)
        for name, p in model.parameters().items():
            assert np.array_equal(p.data, fresh.parameters()[name].data), name

    def test_loss_decreases(self, data, tmp_path):
        cfg = make_config()
        cfg.text.epochs = 2
        path = tmp_path / "text.jsonl"
        with MetricsWriter(path) as mw:
            pretrain_text(data, cfg, metrics=mw)
        records = [json.loads(l) for l in path.read_text().splitlines()]
        assert records[-1]["loss_text"] < records[0]["loss_text"]
        assert all(r["phase"] == "pretrain-text" for r in records)

    def test_negative_ratio_zero_warns(self, data):
        cfg = make_config(negative_ratio=0.0)
        cfg.text.epochs = 0
        with pytest.warns(UserWarning, match="positives only"):
            pretrain_text(data, cfg)

    def test_no_labeled_bags_rejected(self, data):
        cfg = make_config()
        na_only = [b for b in data.bags if b.is_na]
        with pytest.raises(DataError, match="labeled"):
            pretrain_text(data, cfg, bags=na_only)


class TestPretrainGraph:
    def test_zero_epochs_leaves_init_untouched(self, data):
        cfg = make_config()
        cfg.graph.epochs = 0
        model = pretrain_graph(data, cfg)
        fresh = build_graph_model(cfg, data)
        for name, p in model.parameters().items():
            assert np.array_equal(p.data, fresh.parameters()[name].data), name

    def test_loss_decreases(self, data, tmp_path):
        cfg = make_config()
        cfg.graph.epochs = 6
        path = tmp_path / "graph.jsonl"
        with MetricsWriter(path) as mw:
            pretrain_graph(data, cfg, metrics=mw)
        records = [json.loads(l) for l in path.read_text().splitlines()]
        assert records[-1]["loss_graph"] < records[0]["loss_graph"]

    def test_steplr_decays_per_epoch(self, data, tmp_path):
        cfg = make_config()
        cfg.graph.epochs = 3
        path = tmp_path / "g.jsonl"
        with MetricsWriter(path) as mw:
            pretrain_graph(data, cfg, metrics=mw)
        by_epoch = {}
        for line in path.read_text().splitlines():
            r = json.loads(line)
            by_epoch.setdefault(r["epoch"], set()).add(r["lr"])
        lrs = [by_epoch[e].pop() for e in sorted(by_epoch)]
        assert lrs[1] == pytest.approx(lrs[0] * cfg.graph.step_gamma)
        assert lrs[2] == pytest.approx(lrs[0] * cfg.graph.step_gamma ** 2)

    def test_determinism_params_and_metrics(self, data, tmp_path):
        cfg = make_config()
        cfg.graph.epochs = 2
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        with MetricsWriter(p1) as mw:
            m1 = pretrain_graph(data, cfg, metrics=mw)
        with MetricsWriter(p2) as mw:
            m2 = pretrain_graph(data, cfg, metrics=mw)
        assert p1.read_bytes() == p2.read_bytes()
        for name, p in m1.parameters().items():
            assert np.array_equal(p.data, m2.parameters()[name].data), name

    def test_non_finite_forward_aborts_with_location(self, data):
        # finite but near float32 max: the first projection overflows, and
        # the loop must surface that as a divergence at a named step rather
        # than keep optimizing garbage
        huge = InitialEmbeddings(16, {n: np.full(16, 3.3e38)
                                      for n in data.kg.nodes})
        poisoned = dataclasses.replace(data, init=huge)
        cfg = make_config()
        with np.errstate(over="ignore"):
            with pytest.raises(NumericError,
                               match="diverged at epoch 0, step 0"):
                pretrain_graph(poisoned, cfg)

    def test_no_ehr_init_uses_symmetric_uniform(self, data):
        cfg = make_config(no_ehr_init=True)
        h = init_node_matrix(data.kg, cfg, data.init)
        assert h.shape == (data.kg.num_nodes, cfg.dims.d_hi)
        limit = np.sqrt(6.0 / (data.kg.num_nodes + cfg.dims.d_hi))
        assert np.all(np.abs(h) <= limit)
        assert not np.array_equal(h, init_node_matrix(data.kg, make_config(),
                                                      data.init))

    def test_missing_init_without_flag_rejected(self, data):
        cfg = make_config()
        with pytest.raises(DataError, match="no_ehr_init"):
            init_node_matrix(data.kg, cfg, None)

    def test_init_dim_mismatch_rejected(self, data):
        cfg = make_config()
        cfg.dims.d_hi = 99
        with pytest.raises(DataError, match="d_hi"):
            init_node_matrix(data.kg, cfg, data.init)


class TestAblationWiring:
    def test_no_unaligned_restricts_to_aligned_pairs(self, data):
        # keep bags for only half the edge-bearing pairs so the graph has
        # pairs with no text counterpart
        positives = [b for b in data.bags if not b.is_na]
        partial = dataclasses.replace(
            data, bags=positives[::2] + [b for b in data.bags if b.is_na])
        full = graph_training_pairs(partial, make_config())
        restricted = graph_training_pairs(partial,
                                          make_config(no_unaligned=True))
        aligned_count = len(partial.multimodal().aligned)
        assert len(restricted) == aligned_count
        assert len(restricted) < len(full)
        full_pairs = {pair for pair, _ in full}
        assert all(pair in full_pairs for pair, _ in restricted)

    def test_labels_match_edge_types(self, data):
        for pair, label in graph_training_pairs(data, make_config())[:20]:
            edges = data.kg.pairs()[pair]
            expected = data.vocab.label_vector([e.relation for e in edges])
            assert np.array_equal(label, expected)


class TestCotrain:
    def test_shared_relations_average(self, data):
        cfg = make_config()
        cfg.text.epochs = 0
        cfg.graph.epochs = 0
        cfg.train.cotrain_epochs = 0
        tm = pretrain_text(data, cfg)
        gm = pretrain_graph(data, cfg)
        expected = 0.5 * (tm.relations.R.data + gm.relations.R.data)
        model = cotrain(data, tm, gm, cfg)
        assert np.array_equal(model.relations.R.data, expected)
        assert model.text.relations.R is model.graph.relations.R

    def test_equal_modal_relations_fuse_to_same(self, data):
        cfg = make_config()
        cfg.text.epochs = 0
        cfg.graph.epochs = 0
        cfg.train.cotrain_epochs = 0
        tm = pretrain_text(data, cfg)
        gm = pretrain_graph(data, cfg)
        gm.relations.R.data[...] = tm.relations.R.data
        model = cotrain(data, tm, gm, cfg)
        assert np.array_equal(model.relations.R.data, tm.relations.R.data)

    @pytest.mark.parametrize("variant", ["remap", "remap_m", "remap_b"])
    def test_one_batch_loss_matches_oracle(self, data, tmp_path, variant):
        cfg = make_config(variant=variant)
        cfg.text.epochs = 0
        cfg.graph.epochs = 0
        cfg.train.cotrain_epochs = 1
        cfg.text.batch_size = 1
        cfg.text.grad_accum = 1

        md = data.multimodal()
        first = md.aligned[0]
        aligned = [(first.bag, first.bag.label)]

        # oracle from an identical fresh initialization, fused by hand
        tm = pretrain_text(data, cfg)
        gm = pretrain_graph(data, cfg)
        shared = shared_relations(tm.relations, gm.relations)
        tm.relations = shared
        gm.relations = shared
        p_g = ops.reshape(gm.score_pairs([first.bag.pair]),
                          (data.vocab.K,))
        rng = np.random.default_rng(stable_seed(
            cfg.seed, "cotrain-sentences", 0, first.bag.subject,
            first.bag.object))
        p_t = tm.score_pair(first.bag, mode="train", rng=rng)
        label = first.bag.label
        loss_t = bce_loss(p_t, label)
        loss_g = bce_loss(p_g, label)
        if variant == "remap":
            expected = float(loss_t.data) + float(loss_g.data)
        elif variant == "remap_m":
            expected = float(remap_m_loss(
                loss_t, loss_g, softmax_normalize(p_t),
                softmax_normalize(p_g), cfg.train.lambda_m).data)
        else:
            expected = float(remap_b_loss(loss_t, loss_g, p_t, p_g, label,
                                          cfg.train.lambda_b).data)

        tm2 = pretrain_text(data, cfg)
        gm2 = pretrain_graph(data, cfg)
        path = tmp_path / f"{variant}.jsonl"
        with MetricsWriter(path) as mw:
            cotrain(data, tm2, gm2, cfg, metrics=mw, aligned=aligned)
        record = json.loads(path.read_text().splitlines()[0])
        assert record["loss_total"] == pytest.approx(expected, abs=1e-6)
        if variant == "remap":
            assert record["loss_align"] == pytest.approx(0.0, abs=1e-9)

    def test_lambda_zero_variants_bit_identical_to_plain(self, data):
        results = {}
        for variant, overrides in (
                ("remap", {}),
                ("remap_m", {"lambda_m": 0.0}),
                ("remap_b", {"lambda_b": 0.0})):
            cfg = make_config(variant=variant, **overrides)
            cfg.text.epochs = 0
            cfg.graph.epochs = 0
            cfg.train.cotrain_epochs = 1
            tm = pretrain_text(data, cfg)
            gm = pretrain_graph(data, cfg)
            model = cotrain(data, tm, gm, cfg)
            results[variant] = {name: p.data.copy()
                                for name, p in model.parameters().items()}
        for variant in ("remap_m", "remap_b"):
            for name, arr in results["remap"].items():
                assert np.array_equal(arr, results[variant][name]), \
                    (variant, name)

    def test_missing_modality_pair_skipped_with_warning(self, data):
        cfg = make_config(variant="remap_b")
        cfg.text.epochs = 0
        cfg.graph.epochs = 0
        cfg.train.cotrain_epochs = 1
        cfg.text.batch_size = 1
        cfg.text.grad_accum = 1
        md = data.multimodal()
        good = md.aligned[0]
        ghost = SentenceBag(subject="NOWHERE", object="ABSENT",
                            label=good.bag.label,
                            sentences=good.bag.sentences)
        tm = pretrain_text(data, cfg)
        gm = pretrain_graph(data, cfg)
        with pytest.warns(UserWarning, match="lacks graph nodes"):
            cotrain(data, tm, gm, cfg,
                    aligned=[(good.bag, good.bag.label),
                             (ghost, ghost.label)])

    def test_all_pairs_missing_rejected(self, data):
        cfg = make_config()
        cfg.text.epochs = 0
        cfg.graph.epochs = 0
        tm = pretrain_text(data, cfg)
        gm = pretrain_graph(data, cfg)
        md = data.multimodal()
        ghost = SentenceBag(subject="NOWHERE", object="ABSENT",
                            label=md.aligned[0].bag.label,
                            sentences=md.aligned[0].bag.sentences)
        with pytest.warns(UserWarning):
            with pytest.raises(DataError, match="aligned"):
                cotrain(data, tm, gm, cfg,
                        aligned=[(ghost, ghost.label)])


@pytest.fixture(scope="module")
def trained(data):
    cfg = make_config()
    tm = pretrain_text(data, cfg)
    gm = pretrain_graph(data, cfg)
    model = cotrain(data, tm, gm, cfg)
    return cfg, model


class TestPredict:
    def test_graph_modality(self, data, trained):
        _, model = trained
        pair = data.multimodal().aligned[0].bag.pair
        p = predict(model, pair, "graph")
        assert p.shape == (data.vocab.K,)
        assert np.all((p > 0) & (p < 1))

    def test_both_is_elementwise_max(self, data, trained):
        _, model = trained
        bag = data.multimodal().aligned[0].bag
        p_t = predict(model, bag.pair, "text", bag=bag)
        p_g = predict(model, bag.pair, "graph")
        p_b = predict(model, bag.pair, "both", bag=bag)
        assert np.array_equal(p_b, np.maximum(p_t, p_g))

    def test_repeated_calls_identical(self, data, trained):
        _, model = trained
        bag = data.multimodal().aligned[0].bag
        a = predict(model, bag.pair, "both", bag=bag)
        b = predict(model, bag.pair, "both", bag=bag)
        assert np.array_equal(a, b)

    def test_text_without_bag_unavailable(self, data, trained):
        _, model = trained
        pair = data.multimodal().aligned[0].bag.pair
        with pytest.raises(AvailabilityError, match="bag"):
            predict(model, pair, "text")

    def test_unknown_node_unavailable(self, trained):
        _, model = trained
        with pytest.raises(AvailabilityError, match="not in the graph"):
            predict(model, ("NOWHERE", "ABSENT"), "graph")

    def test_wrong_bag_pair_rejected(self, data, trained):
        _, model = trained
        md = data.multimodal()
        bag = md.aligned[0].bag
        other = md.aligned[1].bag.pair
        with pytest.raises(AvailabilityError, match="query"):
            predict(model, other, "text", bag=bag)

    def test_graph_only_model_has_no_text(self, data):
        cfg = make_config()
        cfg.graph.epochs = 0
        gm = pretrain_graph(data, cfg)
        bag = data.multimodal().aligned[0].bag
        with pytest.raises(AvailabilityError, match="no text"):
            predict(gm, bag.pair, "text", bag=bag)

    def test_bad_modality(self, trained):
        _, model = trained
        with pytest.raises(ValueError, match="modality"):
            predict(model, ("A", "B"), "audio")


class TestPersistence:
    def test_cotrained_round_trip_scores_bit_exact(self, data, trained,
                                                   tmp_path):
        cfg, model = trained
        pairs = [p.bag.pair for p in data.multimodal().aligned[:12]]
        bags = [p.bag for p in data.multimodal().aligned[:12]]
        before_g = score_pairs_eval(model.graph, pairs)
        before_t = score_bags_eval(model.text, bags)
        path = tmp_path / "joint.ckpt"
        save_model(path, model, cfg, thresholds={"DDx": 0.5})
        loaded, ck = load_model(path, data)
        assert isinstance(loaded, CotrainedModel)
        after_g = score_pairs_eval(loaded.graph, pairs)
        after_t = score_bags_eval(loaded.text, bags)
        assert np.array_equal(before_g.view(np.uint32),
                              after_g.view(np.uint32))
        assert np.array_equal(before_t.view(np.uint32),
                              after_t.view(np.uint32))
        assert ck.thresholds == {"DDx": 0.5}
        assert set(ck.components) == {"text", "graph", "shared-relations"}

    def test_graph_only_round_trip(self, data, tmp_path):
        cfg = make_config()
        cfg.graph.epochs = 1
        gm = pretrain_graph(data, cfg)
        path = tmp_path / "g.ckpt"
        save_model(path, gm, cfg)
        loaded, ck = load_model(path, data)
        assert ck.components == ("graph",)
        pairs = [p.bag.pair for p in data.multimodal().aligned[:6]]
        assert np.array_equal(score_pairs_eval(gm, pairs),
                              score_pairs_eval(loaded, pairs))
