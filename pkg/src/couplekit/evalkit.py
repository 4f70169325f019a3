"""Ranking evaluation under the 101-candidate protocol.

Each test case scores its ground truth against 100 sampled negatives by
dot product with the inferred user vector; HR@K and NDCG@K are aggregated
overall and split by the cold-user flag. Negative samples are fixed per
case by deriving their seed from the split seed and case index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .data import (InteractionLog, ItemCatalog, PoolTooSmallError, SplitResult,
                   sample_eval_negatives)
from .encoder import embed_item, make_batch
from .model import TrainConfig, leaf_params, user_forward

EVAL_BATCH = 256


@dataclass
class EvalReport:
    metrics: dict[str, dict[str, float]]  # "hr@10" -> {"overall": .., "cold": .., "warm": ..}
    case_counts: dict[str, int]
    skipped: int
    candidate_count: int
    seed: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "metrics": self.metrics,
            "case_counts": self.case_counts,
            "skipped": self.skipped,
            "candidate_count": self.candidate_count,
            "seed": self.seed,
            "config": self.config,
        }
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(metrics=d["metrics"], case_counts=d["case_counts"], skipped=d["skipped"],
                   candidate_count=d["candidate_count"], seed=d["seed"], config=d["config"])

    def to_table(self) -> str:
        slices = ("overall", "cold", "warm")
        lines = [f"{'metric':<10}" + "".join(f"{s:>10}" for s in slices)]
        for name in sorted(self.metrics):
            row = self.metrics[name]
            lines.append(f"{name:<10}" + "".join(f"{row[s]:>10.5f}" for s in slices))
        lines.append(f"cases: {self.case_counts} skipped: {self.skipped}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["metric,k,slice,value"]
        for name in sorted(self.metrics):
            metric, k = name.split("@")
            for s, v in sorted(self.metrics[name].items()):
                lines.append(f"{metric},{k},{s},{v!r}")
        return "\n".join(lines) + "\n"


def uniform_rank_ndcg(k: int, candidate_count: int) -> float:
    """Exact expected NDCG@k when the truth's rank is uniform over the candidates."""
    return sum(1.0 / np.log2(r + 1) for r in range(1, k + 1)) / candidate_count


def rank_and_score(user_vec: np.ndarray, candidate_vecs: np.ndarray,
                   truth_index: int, k: int) -> tuple[int, float]:
    """1-based rank of the truth by dot product, ties broken by index."""
    scores = candidate_vecs @ user_vec
    t = scores[truth_index]
    rank = 1 + int(np.sum(scores > t)) + int(np.sum(scores[:truth_index] == t))
    if rank <= k:
        return 1, 1.0 / np.log2(rank + 1)
    return 0, 0.0


def _case_seed(split_seed: int, case_idx: int) -> int:
    return int(np.random.SeedSequence(entropy=split_seed, spawn_key=(case_idx,)).generate_state(1)[0])


def _aggregate(per_case: list[tuple[bool, dict[str, float]]], ks, skipped: int,
               seed: int, config: dict) -> EvalReport:
    metrics: dict[str, dict[str, float]] = {}
    cold_flags = np.array([c for c, _ in per_case], dtype=bool)
    counts = {"overall": len(per_case), "cold": int(cold_flags.sum()),
              "warm": int((~cold_flags).sum())}
    for k in ks:
        for metric in ("hr", "ndcg"):
            vals = np.array([m[f"{metric}@{k}"] for _, m in per_case])
            entry = {"overall": float(vals.mean()) if len(vals) else 0.0}
            for name, sel in (("cold", cold_flags), ("warm", ~cold_flags)):
                entry[name] = float(vals[sel].mean()) if sel.any() else 0.0
            metrics[f"{metric}@{k}"] = entry
    return EvalReport(metrics=metrics, case_counts=counts, skipped=skipped,
                      candidate_count=101, seed=seed, config=config)


def _user_vectors(params: dict, cases, catalog: ItemCatalog, cfg: TrainConfig) -> np.ndarray:
    """Infer-mode user vectors for all cases, batched."""
    vecs = np.zeros((len(cases), cfg.d))
    for start in range(0, len(cases), EVAL_BATCH):
        chunk = cases[start:start + EVAL_BATCH]
        batch = make_batch([c.history for c in chunk], catalog, cfg.n_cap, cfg.l_cap)
        tape = Tape()
        P = leaf_params(tape, params)
        vecs[start:start + len(chunk)] = user_forward(tape, P, batch, cfg, train=False).value
    return vecs


def _item_vector(params: dict, catalog: ItemCatalog, item_id: str, n_cap: int) -> np.ndarray:
    tags = np.asarray(catalog.items[item_id].tags[:n_cap])
    return embed_item(tags, np.ones(len(tags)), params, catalog.items[item_id].domain,
                      training=False)


def evaluate(params: dict, split: SplitResult, catalog: ItemCatalog, cfg: TrainConfig,
             ks=(5, 10), count_random: int = 50, count_popular: int = 50) -> EvalReport:
    """Model evaluation over all test cases; skips cases with small pools."""
    cases = [c for c in split.test_cases if len(c.history) > 0]
    skipped = len(split.test_cases) - len(cases)
    counts = split.train_events.item_counts()
    user_items: dict[str, set[str]] = {}
    for user, item, _ in split.train_events.events:
        user_items.setdefault(user, set()).add(item)

    uvecs = _user_vectors(params, cases, catalog, cfg)
    item_cache: dict[str, np.ndarray] = {}

    def item_vec(item_id: str) -> np.ndarray:
        if item_id not in item_cache:
            item_cache[item_id] = _item_vector(params, catalog, item_id, cfg.n_cap)
        return item_cache[item_id]

    per_case = []
    for idx, case in enumerate(cases):
        try:
            negatives = sample_eval_negatives(
                case, catalog, split.train_events, split.target_domain,
                count_random, count_popular, seed=_case_seed(split.seed, idx),
                counts=counts, user_items=user_items.get(case.user, set()))
        except PoolTooSmallError:
            skipped += 1
            continue
        cand_ids = [case.truth] + negatives
        cand = np.stack([item_vec(i) for i in cand_ids])
        row = {}
        for k in ks:
            hr, ndcg = rank_and_score(uvecs[idx], cand, 0, k)
            row[f"hr@{k}"] = float(hr)
            row[f"ndcg@{k}"] = ndcg
        per_case.append((case.cold, row))
    return _aggregate(per_case, ks, skipped, split.seed, cfg.to_dict())


def baseline_scores(kind: str, split: SplitResult, catalog: ItemCatalog,
                    train_log: InteractionLog, seed: int = 0, ks=(5, 10),
                    count_random: int = 50, count_popular: int = 50) -> EvalReport:
    """Random or train-popularity reference points under the same protocol."""
    if kind not in ("random", "popularity"):
        raise ValueError(f"unknown baseline kind {kind!r}")
    counts = train_log.item_counts()
    user_items: dict[str, set[str]] = {}
    for user, item, _ in train_log.events:
        user_items.setdefault(user, set()).add(item)
    rng = np.random.default_rng(seed)
    cases = list(split.test_cases)
    per_case = []
    skipped = 0
    for idx, case in enumerate(cases):
        try:
            negatives = sample_eval_negatives(
                case, catalog, train_log, split.target_domain,
                count_random, count_popular, seed=_case_seed(split.seed, idx),
                counts=counts, user_items=user_items.get(case.user, set()))
        except PoolTooSmallError:
            skipped += 1
            continue
        cand_ids = [case.truth] + negatives
        if kind == "random":
            scores = rng.random(len(cand_ids))
        else:
            scores = np.array([counts.get(i, 0) for i in cand_ids], dtype=np.float64)
        t = scores[0]
        rank = 1 + int(np.sum(scores > t))  # truth is index 0; equal scores rank it first
        row = {}
        for k in ks:
            hit = 1 if rank <= k else 0
            row[f"hr@{k}"] = float(hit)
            row[f"ndcg@{k}"] = 1.0 / np.log2(rank + 1) if hit else 0.0
        per_case.append((case.cold, row))
    return _aggregate(per_case, ks, skipped, seed, {"baseline": kind})
