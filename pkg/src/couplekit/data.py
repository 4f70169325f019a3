"""Dataset schemas, TSV ingestion, leave-one-out splitting and synthesis.

File formats:
  catalog:      item_id <TAB> domain_id <TAB> tag1,tag2,...   (# comments ok)
  interactions: user_id <TAB> item_id <TAB> timestamp
  split dir:    split_manifest.json + train_interactions.tsv
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Iterable

import numpy as np


class DataFormatError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class Item:
    domain: int
    tags: tuple[int, ...]


@dataclass
class ItemCatalog:
    items: dict[str, Item]
    tag_names: list[str]
    num_domains: int

    @property
    def num_tags(self) -> int:
        return len(self.tag_names)

    def __post_init__(self) -> None:
        n, q = self.num_tags, self.num_domains
        for item_id, item in self.items.items():
            if not item.tags:
                raise DataFormatError(f"item {item_id!r} has an empty tag list")
            if any(t < 0 or t >= n for t in item.tags):
                raise DataFormatError(f"item {item_id!r} has a tag index outside [0, {n})")
            if item.domain < 0 or item.domain >= q:
                raise DataFormatError(f"item {item_id!r} has domain {item.domain} outside [0, {q})")


@dataclass
class InteractionLog:
    events: list[tuple[str, str, int]]  # (user, item, timestamp)

    def by_user(self) -> dict[str, list[tuple[str, str, int]]]:
        """Per-user events sorted by (timestamp, item id)."""
        out: dict[str, list[tuple[str, str, int]]] = {}
        for ev in self.events:
            out.setdefault(ev[0], []).append(ev)
        for user in out:
            out[user].sort(key=lambda ev: (ev[2], ev[1]))
        return out

    def item_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for _, item, _ in self.events:
            counts[item] = counts.get(item, 0) + 1
        return counts


@dataclass(frozen=True)
class TestCase:
    user: str
    history: tuple[str, ...]  # time-ordered, oldest first
    truth: str
    cold: bool


@dataclass
class SplitResult:
    train_events: InteractionLog
    test_cases: list[TestCase]
    cold_item_set: set[str]
    target_domain: int
    seed: int
    cold_user_fraction: float


@dataclass
class SyntheticConfig:
    groups: int = 4
    users_per_group: int = 500
    items_per_domain: int = 1500
    tag_vocab: int = 200
    overlap: float = 0.6          # fraction of tags shared across domains
    tags_per_item: int = 4
    interactions_per_user: int = 80
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        counts = (self.groups, self.users_per_group, self.items_per_domain,
                  self.tag_vocab, self.tags_per_item, self.interactions_per_user)
        if any(c <= 0 for c in counts):
            raise DataFormatError("synthetic config counts must be positive")
        if not (0.0 <= self.overlap <= 1.0 and 0.0 <= self.noise <= 1.0):
            raise DataFormatError("overlap and noise must lie in [0, 1]")
        if self.tag_vocab < self.groups:
            raise DataFormatError(f"tag vocabulary {self.tag_vocab} smaller than group count {self.groups}")


def load_catalog(path: str) -> ItemCatalog:
    """Parse a catalog TSV; tag strings are interned in first-seen order."""
    items: dict[str, Item] = {}
    tag_index: dict[str, int] = {}
    max_domain = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            item_id, domain_str, tag_str = parts
            if item_id in items:
                raise DataFormatError(f"{path}:{lineno}: duplicate item id {item_id!r}")
            try:
                domain = int(domain_str)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad domain id {domain_str!r}") from None
            tags = [t for t in tag_str.split(",") if t]
            if not tags:
                raise DataFormatError(f"{path}:{lineno}: item {item_id!r} has an empty tag list")
            ids = []
            for t in tags:
                if t not in tag_index:
                    tag_index[t] = len(tag_index)
                ids.append(tag_index[t])
            items[item_id] = Item(domain=domain, tags=tuple(ids))
            max_domain = max(max_domain, domain)
    if not items:
        raise DataFormatError(f"{path}: catalog is empty")
    return ItemCatalog(items=items, tag_names=list(tag_index), num_domains=max_domain + 1)


def save_catalog(catalog: ItemCatalog, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item_id, item in catalog.items.items():
            tags = ",".join(catalog.tag_names[t] for t in item.tags)
            fh.write(f"{item_id}\t{item.domain}\t{tags}\n")


def load_interactions(path: str, catalog: ItemCatalog) -> InteractionLog:
    events: list[tuple[str, str, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            user, item, ts_str = parts
            if item not in catalog.items:
                raise DataFormatError(f"{path}:{lineno}: unknown item id {item!r}")
            try:
                ts = int(ts_str)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad timestamp {ts_str!r}") from None
            if ts < 0:
                raise DataFormatError(f"{path}:{lineno}: negative timestamp {ts}")
            events.append((user, item, ts))
    return InteractionLog(events=events)


def save_interactions(log: InteractionLog, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user, item, ts in log.events:
            fh.write(f"{user}\t{item}\t{ts}\n")


def leave_one_out_split(log: InteractionLog, catalog: ItemCatalog, target_domain: int,
                        cold_user_fraction: float = 0.5, seed: int = 0) -> SplitResult:
    """Hold out each eligible user's last target-domain item as ground truth.

    Ground-truth items are erased from training globally, so they stay
    fully cold. A seeded fraction of test users additionally loses every
    target-domain item from their test-time history; users whose history
    already lacks target-domain items are counted toward that quota.
    """
    per_user = log.by_user()
    eligible = [u for u, evs in sorted(per_user.items())
                if len(evs) >= 2 and any(catalog.items[e[1]].domain == target_domain for e in evs)]
    if not eligible:
        raise DataFormatError("no user is eligible for leave-one-out splitting")

    truths: dict[str, str] = {}
    histories: dict[str, list[str]] = {}
    for user in eligible:
        evs = per_user[user]
        last_target = max(i for i, e in enumerate(evs) if catalog.items[e[1]].domain == target_domain)
        truths[user] = evs[last_target][1]
        histories[user] = [e[1] for i, e in enumerate(evs) if i != last_target]

    cold_items = set(truths.values())

    natural_cold = [u for u in eligible
                    if not any(catalog.items[i].domain == target_domain for i in histories[u])]
    quota = int(round(cold_user_fraction * len(eligible)))
    cold_users = set(natural_cold)
    remaining = [u for u in eligible if u not in cold_users]
    need = quota - len(cold_users)
    if need > 0 and remaining:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(remaining), size=min(need, len(remaining)), replace=False)
        cold_users.update(remaining[i] for i in picked)

    cases = []
    for user in eligible:
        hist = histories[user]
        if user in cold_users:
            hist = [i for i in hist if catalog.items[i].domain != target_domain]
        cases.append(TestCase(user=user, history=tuple(hist), truth=truths[user],
                              cold=user in cold_users))

    test_users = set(eligible)
    train_events = [ev for ev in log.events
                    if ev[1] not in cold_items
                    and not (ev[0] in test_users and ev[1] == truths.get(ev[0]))]
    return SplitResult(train_events=InteractionLog(train_events), test_cases=cases,
                       cold_item_set=cold_items, target_domain=target_domain,
                       seed=seed, cold_user_fraction=cold_user_fraction)


class PoolTooSmallError(ValueError):
    def __init__(self, pool_size: int, needed: int) -> None:
        super().__init__(f"negative-sample pool has {pool_size} items, need {needed}")
        self.pool_size = pool_size


def sample_eval_negatives(case: TestCase, catalog: ItemCatalog, train_log: InteractionLog,
                          target_domain: int, count_random: int = 50, count_popular: int = 50,
                          seed: int = 0, counts: dict[str, int] | None = None,
                          user_items: set[str] | None = None) -> list[str]:
    """Sample disjoint random + popularity-weighted negatives for one case.

    Popularity uses training interaction counts with +1 smoothing so cold
    items remain sampleable. `counts` and `user_items` allow callers to
    precompute per-log lookups when sampling for many cases.
    """
    interacted = {case.truth, *case.history}
    if user_items is None:
        user_items = {item for user, item, _ in train_log.events if user == case.user}
    interacted.update(user_items)
    pool = sorted(item_id for item_id, item in catalog.items.items()
                  if item.domain == target_domain and item_id not in interacted)
    needed = count_random + count_popular
    if len(pool) < needed:
        raise PoolTooSmallError(len(pool), needed)
    if counts is None:
        counts = train_log.item_counts()
    rng = np.random.default_rng(seed)
    weights = np.array([counts.get(i, 0) + 1 for i in pool], dtype=np.float64)
    weights = weights / weights.sum()
    pop_idx = rng.choice(len(pool), size=count_popular, replace=False, p=weights)
    popular = [pool[i] for i in pop_idx]
    rest = [i for i in pool if i not in set(popular)]
    rand_idx = rng.choice(len(rest), size=count_random, replace=False)
    random_half = [rest[i] for i in rand_idx]
    return random_half + popular


def _sample_distinct_tags(rng, n: int, profile: list[int], vocab: list[int], bias: float) -> tuple[int, ...]:
    chosen: list[int] = []
    seen: set[int] = set()
    guard = 0
    while len(chosen) < n:
        source = profile if (profile and rng.random() < bias) else vocab
        t = int(source[rng.integers(len(source))])
        if t not in seen:
            seen.add(t)
            chosen.append(t)
        guard += 1
        if guard > 200 * n:  # vocabulary exhausted relative to n
            extras = [t for t in vocab if t not in seen]
            chosen.extend(extras[: n - len(chosen)])
            break
    return tuple(chosen)


# Probability that a non-noise item draws each tag from its group profile.
PROFILE_TAG_BIAS = 0.9
# Source-domain activity multiplier: 3 of every 4 events land in domain 0.
SOURCE_EVENT_FRACTION = 0.75
# Each user prefers a personal subset of this fraction of the group profile,
# giving the corpus within-group taste structure on top of the group signal.
USER_PROFILE_FRACTION = 0.1


def synth_generate(config: SyntheticConfig) -> tuple[ItemCatalog, InteractionLog]:
    """Two-domain synthetic corpus with planted group structure.

    Group tag-profiles are disjoint blocks of the cross-domain shared
    vocabulary, so group signal survives cold-user erasure of one domain.
    Each user additionally prefers a personal subset of the group profile;
    non-noise interactions hit items sharing >= 1 personal tag (falling
    back to >= 1 group-profile tag when no item matches).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_tags, groups = config.tag_vocab, config.groups

    shared_count = int(round(config.overlap * n_tags))
    if shared_count < groups:
        raise DataFormatError(
            f"shared vocabulary ({shared_count} tags) too small for {groups} group profiles")
    shared = list(range(shared_count))
    leftover = n_tags - shared_count
    dom_extra = [list(range(shared_count, shared_count + leftover // 2)),
                 list(range(shared_count + leftover // 2, n_tags))]
    block = shared_count // groups
    profiles = [shared[g * block:(g + 1) * block] for g in range(groups)]
    domain_vocab = [shared + dom_extra[0], shared + dom_extra[1]]

    items: dict[str, Item] = {}
    group_items: list[list[list[str]]] = [[[] for _ in range(groups)] for _ in range(2)]
    all_items: list[list[str]] = [[], []]
    tag_items: list[dict[int, list[str]]] = [{}, {}]
    for dom in range(2):
        for k in range(config.items_per_domain):
            g = k % groups
            item_id = f"d{dom}_i{k:05d}"
            tags = _sample_distinct_tags(rng, config.tags_per_item, profiles[g],
                                         domain_vocab[dom], PROFILE_TAG_BIAS)
            items[item_id] = Item(domain=dom, tags=tags)
            all_items[dom].append(item_id)
            for t in tags:
                tag_items[dom].setdefault(t, []).append(item_id)
            for gg in range(groups):
                if any(t in profiles[gg] for t in tags):
                    group_items[dom][gg].append(item_id)
    for dom in range(2):
        for g in range(groups):
            if not group_items[dom][g]:
                raise DataFormatError(f"no items in domain {dom} match group {g}'s profile")

    events: list[tuple[str, str, int]] = []
    total = config.interactions_per_user
    n_source = max(1, int(round(SOURCE_EVENT_FRACTION * total)))
    n_target = max(1, total - n_source)
    personal_size = max(1, int(round(USER_PROFILE_FRACTION * block)))
    for g in range(groups):
        for j in range(config.users_per_group):
            user = f"u{g}_{j:05d}"
            personal = rng.choice(profiles[g], size=min(personal_size, block), replace=False)
            user_pools = []
            for dom in range(2):
                pool = sorted({i for t in personal for i in tag_items[dom].get(int(t), [])})
                user_pools.append(pool if pool else group_items[dom][g])
            domains = [0] * n_source + [1] * n_target
            rng.shuffle(domains)
            if domains[-1] != 1:  # keep the last event in the target domain
                last_target = max(i for i, d in enumerate(domains) if d == 1)
                domains[last_target], domains[-1] = domains[-1], domains[last_target]
            for ts, dom in enumerate(domains):
                if rng.random() < config.noise:
                    pool = all_items[dom]
                else:
                    pool = user_pools[dom]
                item_id = pool[rng.integers(len(pool))]
                events.append((user, item_id, ts))

    tag_names = [f"t{t:04d}" for t in range(n_tags)]
    catalog = ItemCatalog(items=items, tag_names=tag_names, num_domains=2)
    return catalog, InteractionLog(events=events)


def save_split(split: SplitResult, out_dir: str, config_echo: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_interactions(split.train_events, os.path.join(out_dir, "train_interactions.tsv"))
    manifest = {
        "format_version": 1,
        "target_domain": split.target_domain,
        "seed": split.seed,
        "cold_user_fraction": split.cold_user_fraction,
        "cold_items": sorted(split.cold_item_set),
        "cases": [
            {"user": c.user, "history": list(c.history), "truth": c.truth, "cold": c.cold}
            for c in split.test_cases
        ],
        "config": config_echo or {},
    }
    with open(os.path.join(out_dir, "split_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_split(split_dir: str, catalog: ItemCatalog) -> SplitResult:
    with open(os.path.join(split_dir, "split_manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    train = load_interactions(os.path.join(split_dir, "train_interactions.tsv"), catalog)
    cases = [TestCase(user=c["user"], history=tuple(c["history"]), truth=c["truth"], cold=c["cold"])
             for c in manifest["cases"]]
    return SplitResult(train_events=train, test_cases=cases,
                       cold_item_set=set(manifest["cold_items"]),
                       target_domain=manifest["target_domain"], seed=manifest["seed"],
                       cold_user_fraction=manifest["cold_user_fraction"])


def training_pairs(train_log: InteractionLog, max_history: int) -> list[tuple[str, tuple[str, ...], str]]:
    """Sliding next-item pairs (user, history window, positive) per user sequence."""
    pairs = []
    for user, evs in sorted(train_log.by_user().items()):
        seq = [e[1] for e in evs]
        for t in range(1, len(seq)):
            history = tuple(seq[max(0, t - max_history):t])
            pairs.append((user, history, seq[t]))
    return pairs
