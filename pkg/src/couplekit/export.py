"""TSV exports: embedding tables, user vectors, and tree leaf assignments."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape
from .data import ItemCatalog, SplitResult
from .encoder import make_batch, weighted_aggregate, encode_history
from .memtree import propagate_weights_np, rank_topk
from .model import TrainConfig, leaf_params, user_forward


def _write_rows(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, vec in rows:
            fh.write(key + "\t" + "\t".join(repr(float(x)) for x in vec) + "\n")


def export_tag_embeddings(params: dict, catalog: ItemCatalog, path: str) -> None:
    _write_rows(path, zip(catalog.tag_names, params["emb/tags"]))


def export_leaf_embeddings(params: dict, cfg: TrainConfig, path: str) -> None:
    slots = params[cfg.tree().slot_names()[-1]]
    _write_rows(path, ((str(i), row) for i, row in enumerate(slots)))


def _history_vectors(params: dict, histories, catalog: ItemCatalog, cfg: TrainConfig) -> np.ndarray:
    tape = Tape()
    P = leaf_params(tape, params)
    batch = make_batch(histories, catalog, cfg.n_cap, cfg.l_cap)
    heads = encode_history(tape, P, batch, cfg.heads, training=False,
                           position_embeddings=cfg.position_embeddings)
    return weighted_aggregate(tape, heads, P["wa/head_m"]).value


def export_user_embeddings(params: dict, split: SplitResult, catalog: ItemCatalog,
                           cfg: TrainConfig, path: str) -> None:
    cases = [c for c in split.test_cases if c.history]
    rows = []
    for start in range(0, len(cases), 256):
        chunk = cases[start:start + 256]
        tape = Tape()
        P = leaf_params(tape, params)
        batch = make_batch([c.history for c in chunk], catalog, cfg.n_cap, cfg.l_cap)
        vecs = user_forward(tape, P, batch, cfg, train=False).value
        rows.extend((c.user, v) for c, v in zip(chunk, vecs))
    _write_rows(path, rows)


def export_leaf_assignments(params: dict, split: SplitResult, catalog: ItemCatalog,
                            cfg: TrainConfig, path: str) -> None:
    """user_id <TAB> leaf_index <TAB> weight for each user's top leaf."""
    tree = cfg.tree()
    cases = [c for c in split.test_cases if c.history]
    slot_values = [params[n] for n in tree.slot_names()]
    with open(path, "w", encoding="utf-8") as fh:
        for start in range(0, len(cases), 256):
            chunk = cases[start:start + 256]
            hist = _history_vectors(params, [c.history for c in chunk], catalog, cfg)
            for case, h in zip(chunk, hist):
                leaf_w = propagate_weights_np(tree, slot_values, h)[-1]
                top = int(rank_topk(leaf_w, 1)[0])
                fh.write(f"{case.user}\t{top}\t{float(leaf_w[top])!r}\n")
