"""Catalog/interaction ingestion, leave-one-out splitting, negative sampling,
and the synthetic corpus generator."""

import numpy as np
import pytest

from couplekit.data import (DataFormatError, InteractionLog, Item, ItemCatalog,
                            PoolTooSmallError, SyntheticConfig, TestCase,
                            leave_one_out_split, load_catalog, load_interactions,
                            load_split, sample_eval_negatives, save_catalog,
                            save_interactions, save_split, synth_generate,
                            training_pairs)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestLoadCatalog:
    def test_minimal_two_items(self, tmp_path):
        p = write(tmp_path / "c.tsv", "A\t0\tx,y\nB\t1\ty,z\n")
        cat = load_catalog(p)
        assert cat.num_tags == 3
        assert cat.num_domains == 2
        assert cat.items["A"].tags == (0, 1)
        assert cat.items["B"].tags == (1, 2)

    def test_duplicate_item_names_line(self, tmp_path):
        p = write(tmp_path / "c.tsv", "A\t0\tx\nB\t0\ty\nC\t0\tz\nD\t0\tx\nA\t1\ty\n")
        with pytest.raises(DataFormatError, match=":5:"):
            load_catalog(p)

    def test_empty_tag_list_rejected(self, tmp_path):
        p = write(tmp_path / "c.tsv", "A\t0\t\n")
        with pytest.raises(DataFormatError, match=":1:"):
            load_catalog(p)

    def test_bad_field_count_names_line(self, tmp_path):
        p = write(tmp_path / "c.tsv", "A\t0\tx\nB\t1\n")
        with pytest.raises(DataFormatError, match=":2:"):
            load_catalog(p)

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        p = write(tmp_path / "c.tsv", "# header\n\nA\t0\tx\n")
        assert len(load_catalog(p).items) == 1

    def test_large_catalog_round_trips(self, tmp_path):
        rng = np.random.default_rng(0)
        tag_names = [f"t{i}" for i in range(40)]
        items = {f"i{k:04d}": Item(domain=int(rng.integers(2)),
                                   tags=tuple(int(t) for t in rng.choice(40, size=3, replace=False)))
                 for k in range(1000)}
        cat = ItemCatalog(items=items, tag_names=tag_names, num_domains=2)
        path = tmp_path / "big.tsv"
        save_catalog(cat, str(path))
        loaded = load_catalog(str(path))
        assert loaded.num_domains == cat.num_domains
        assert {loaded.tag_names[t] for i in loaded.items.values() for t in i.tags} == \
               {cat.tag_names[t] for i in cat.items.values() for t in i.tags}
        for item_id, item in cat.items.items():
            got = loaded.items[item_id]
            assert got.domain == item.domain
            assert tuple(loaded.tag_names[t] for t in got.tags) == \
                   tuple(cat.tag_names[t] for t in item.tags)


class TestLoadInteractions:
    @pytest.fixture
    def catalog(self, tmp_path):
        return load_catalog(write(tmp_path / "c.tsv", "A\t0\tx\nB\t1\ty\n"))

    def test_empty_file(self, tmp_path, catalog):
        p = write(tmp_path / "i.tsv", "")
        assert load_interactions(p, catalog).events == []

    def test_unknown_item_named(self, tmp_path, catalog):
        p = write(tmp_path / "i.tsv", "u\tZ\t0\n")
        with pytest.raises(DataFormatError, match="'Z'"):
            load_interactions(p, catalog)

    def test_bad_timestamp(self, tmp_path, catalog):
        p = write(tmp_path / "i.tsv", "u\tA\tnoon\n")
        with pytest.raises(DataFormatError, match="noon"):
            load_interactions(p, catalog)

    def test_negative_timestamp(self, tmp_path, catalog):
        p = write(tmp_path / "i.tsv", "u\tA\t-1\n")
        with pytest.raises(DataFormatError):
            load_interactions(p, catalog)

    def test_shuffled_file_sorts_identically(self, tmp_path, catalog):
        ordered = "u\tA\t0\nu\tB\t1\nv\tB\t0\nv\tA\t2\n"
        shuffled = "v\tA\t2\nu\tB\t1\nv\tB\t0\nu\tA\t0\n"
        a = load_interactions(write(tmp_path / "a.tsv", ordered), catalog)
        b = load_interactions(write(tmp_path / "b.tsv", shuffled), catalog)
        assert a.by_user() == b.by_user()

    def test_tie_break_by_item_id(self, catalog):
        log = InteractionLog(events=[("u", "B", 5), ("u", "A", 5)])
        assert [e[1] for e in log.by_user()["u"]] == ["A", "B"]


@pytest.fixture
def tiny_catalog():
    items = {
        "a": Item(domain=0, tags=(0,)),
        "b": Item(domain=1, tags=(1,)),
        "c": Item(domain=1, tags=(2,)),
    }
    return ItemCatalog(items=items, tag_names=["x", "y", "z"], num_domains=2)


class TestLeaveOneOut:
    def test_last_target_item_becomes_truth(self, tiny_catalog):
        log = InteractionLog(events=[("u", "a", 0), ("u", "b", 1), ("u", "c", 2)])
        split = leave_one_out_split(log, tiny_catalog, target_domain=1,
                                    cold_user_fraction=0.0, seed=0)
        case = split.test_cases[0]
        assert case.truth == "c"
        assert case.history == ("a", "b")
        assert not case.cold

    def test_cold_user_history_erased(self, tiny_catalog):
        log = InteractionLog(events=[("u", "a", 0), ("u", "b", 1), ("u", "c", 2)])
        split = leave_one_out_split(log, tiny_catalog, target_domain=1,
                                    cold_user_fraction=1.0, seed=0)
        case = split.test_cases[0]
        assert case.cold
        assert case.history == ("a",)

    def test_truth_erased_from_training_globally(self, tiny_catalog):
        log = InteractionLog(events=[("u", "a", 0), ("u", "c", 1),
                                     ("v", "c", 0), ("v", "a", 1), ("v", "b", 2)])
        split = leave_one_out_split(log, tiny_catalog, target_domain=1,
                                    cold_user_fraction=0.0, seed=0)
        train_items = {e[1] for e in split.train_events.events}
        assert split.cold_item_set & train_items == set()

    def test_no_eligible_user_errors(self, tiny_catalog):
        log = InteractionLog(events=[("u", "a", 0)])
        with pytest.raises(DataFormatError):
            leave_one_out_split(log, tiny_catalog, target_domain=1)

    def test_cold_fraction_selection_bound(self):
        items = {"s": Item(domain=0, tags=(0,)), "t": Item(domain=1, tags=(1,))}
        cat = ItemCatalog(items=items, tag_names=["x", "y"], num_domains=2)
        # 10,000 users each with one source and two target events
        items["t2"] = Item(domain=1, tags=(1,))
        events = []
        for k in range(10000):
            events += [(f"u{k}", "s", 0), (f"u{k}", "t", 1), (f"u{k}", "t2", 2)]
        split = leave_one_out_split(InteractionLog(events), cat, target_domain=1,
                                    cold_user_fraction=0.5, seed=3)
        flagged = sum(c.cold for c in split.test_cases)
        assert 4800 <= flagged <= 5200

    def test_natural_cold_users_are_flagged(self, tiny_catalog):
        # u's history has no target-domain item left after truth removal
        log = InteractionLog(events=[("u", "a", 0), ("u", "c", 1)])
        split = leave_one_out_split(log, tiny_catalog, target_domain=1,
                                    cold_user_fraction=0.0, seed=0)
        assert split.test_cases[0].cold

    def test_timestamps_sorted_per_user(self, tiny_catalog):
        log = InteractionLog(events=[("u", "c", 5), ("u", "a", 1), ("u", "b", 3)])
        for evs in log.by_user().values():
            ts = [e[2] for e in evs]
            assert ts == sorted(ts)


def pool_catalog(n_items=120):
    items = {"h": Item(domain=0, tags=(0,)), "truth": Item(domain=1, tags=(0,))}
    for k in range(n_items):
        items[f"n{k:03d}"] = Item(domain=1, tags=(0,))
    return ItemCatalog(items=items, tag_names=["x"], num_domains=2)


class TestSampleNegatives:
    def test_exhausts_exact_pool(self):
        cat = pool_catalog(100)
        case = TestCase(user="u", history=("h",), truth="truth", cold=False)
        log = InteractionLog(events=[("u", "h", 0)])
        negs = sample_eval_negatives(case, cat, log, target_domain=1, seed=0)
        assert sorted(negs) == sorted(i for i in cat.items if i.startswith("n"))

    def test_never_returns_truth_or_history(self):
        cat = pool_catalog(150)
        case = TestCase(user="u", history=("h",), truth="truth", cold=False)
        log = InteractionLog(events=[("u", "h", 0)])
        for seed in range(20):
            negs = sample_eval_negatives(case, cat, log, target_domain=1, seed=seed)
            assert len(negs) == 100
            assert len(set(negs)) == 100
            assert "truth" not in negs and "h" not in negs

    def test_pool_too_small_reports_size(self):
        cat = pool_catalog(50)
        case = TestCase(user="u", history=("h",), truth="truth", cold=False)
        with pytest.raises(PoolTooSmallError) as err:
            sample_eval_negatives(case, cat, InteractionLog(events=[]), target_domain=1)
        assert err.value.pool_size == 50

    def test_popularity_half_favors_heavy_item(self):
        cat = pool_catalog(120)
        case = TestCase(user="u", history=("h",), truth="truth", cold=False)
        # n000 holds 90% of the interaction mass
        events = [("w", "n000", t) for t in range(900)]
        events += [(f"w{k}", f"n{1 + (k % 119):03d}", 0) for k in range(100)]
        log = InteractionLog(events=events)
        counts = log.item_counts()
        hits = 0
        trials = 10000
        for seed in range(trials):
            negs = sample_eval_negatives(case, cat, log, target_domain=1,
                                         count_random=5, count_popular=5,
                                         seed=seed, counts=counts, user_items=set())
            hits += "n000" in negs[5:]  # popularity half is the tail
        assert hits / trials >= 0.95

    def test_popularity_weights_normalize(self):
        counts = {"a": 3, "b": 0, "c": 7}
        weights = np.array([counts[i] + 1 for i in ("a", "b", "c")], dtype=np.float64)
        weights = weights / weights.sum()
        assert abs(weights.sum() - 1.0) <= 1e-12


class TestSynthGenerate:
    def test_degenerate_config_always_matches_profile(self):
        cfg = SyntheticConfig(groups=1, users_per_group=20, items_per_domain=50,
                              tag_vocab=30, overlap=1.0, tags_per_item=3,
                              interactions_per_user=10, noise=0.0, seed=1)
        cat, log = synth_generate(cfg)
        profile = set(range(30))  # single group profile: the whole shared block
        for _, item_id, _ in log.events:
            assert set(cat.items[item_id].tags) & profile

    def test_seeded_determinism(self):
        cfg = SyntheticConfig(groups=2, users_per_group=10, items_per_domain=40,
                              tag_vocab=40, interactions_per_user=8, seed=9)
        a_cat, a_log = synth_generate(cfg)
        b_cat, b_log = synth_generate(cfg)
        assert a_cat.items == b_cat.items
        assert a_log.events == b_log.events

    def test_group_profile_match_rate(self):
        cfg = SyntheticConfig(groups=4, users_per_group=50, items_per_domain=300,
                              tag_vocab=200, overlap=0.6, tags_per_item=4,
                              interactions_per_user=20, noise=0.1, seed=0)
        cat, log = synth_generate(cfg)
        shared = int(round(0.6 * 200))
        block = shared // 4
        profiles = [set(range(g * block, (g + 1) * block)) for g in range(4)]
        matches = sum(bool(set(cat.items[item].tags) & profiles[int(user[1])])
                      for user, item, _ in log.events)
        assert matches / len(log.events) >= 0.85

    def test_source_domain_denser(self):
        cfg = SyntheticConfig(groups=2, users_per_group=20, items_per_domain=60,
                              tag_vocab=40, interactions_per_user=20, seed=0)
        cat, log = synth_generate(cfg)
        source = sum(cat.items[i].domain == 0 for _, i, _ in log.events)
        target = len(log.events) - source
        assert source >= 3 * target

    def test_infeasible_config_reported(self):
        with pytest.raises(DataFormatError):
            SyntheticConfig(tag_vocab=3, groups=4).validate()
        with pytest.raises(DataFormatError):
            synth_generate(SyntheticConfig(tag_vocab=100, groups=4, overlap=0.01))

    def test_last_event_is_target_domain(self):
        cfg = SyntheticConfig(groups=2, users_per_group=15, items_per_domain=50,
                              tag_vocab=40, interactions_per_user=12, seed=4)
        cat, log = synth_generate(cfg)
        for evs in log.by_user().values():
            assert cat.items[evs[-1][1]].domain == 1


class TestSplitPersistence:
    def test_round_trip(self, tmp_path, tiny_catalog):
        log = InteractionLog(events=[("u", "a", 0), ("u", "b", 1), ("u", "c", 2)])
        split = leave_one_out_split(log, tiny_catalog, target_domain=1,
                                    cold_user_fraction=0.0, seed=7)
        save_split(split, str(tmp_path / "s"), config_echo={"seed": 7})
        loaded = load_split(str(tmp_path / "s"), tiny_catalog)
        assert loaded.test_cases == split.test_cases
        assert loaded.cold_item_set == split.cold_item_set
        assert loaded.train_events.events == split.train_events.events
        assert loaded.seed == 7

    def test_interactions_round_trip(self, tmp_path, tiny_catalog):
        log = InteractionLog(events=[("u", "a", 0), ("v", "b", 3)])
        save_interactions(log, str(tmp_path / "i.tsv"))
        assert load_interactions(str(tmp_path / "i.tsv"), tiny_catalog).events == log.events


def test_training_pairs_sliding_window():
    log = InteractionLog(events=[("u", "a", 0), ("u", "b", 1), ("u", "c", 2), ("u", "d", 3)])
    pairs = training_pairs(log, max_history=2)
    assert pairs == [
        ("u", ("a",), "b"),
        ("u", ("a", "b"), "c"),
        ("u", ("b", "c"), "d"),
    ]
