"""Item and user-branch encoders built on the autodiff tape.

Items are bags of tags: an item embedding is the mean of its tag
embeddings, plus a domain embedding during training only. User history is
encoded by one self-attention block whose per-head outputs are fused by
learned weighted aggregation; user content comes from a tag-frequency
attention over the flattened tag sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Ref, Tape, tensor

NEG_INF_FILL = -1e30
LAYER_NORM_EPS = 1e-6


@dataclass
class SequenceBatch:
    """Padded per-user item sequences.

    Padding positions carry tag id 0 and mask 0; every row has at least
    one unmasked item, placed from position 0 upward (oldest first).
    """

    tag_ids: np.ndarray    # (B, l, n) int64
    tag_mask: np.ndarray   # (B, l, n) 0/1 float
    item_mask: np.ndarray  # (B, l) 0/1 float
    domain_ids: np.ndarray  # (B, l) int64

    @property
    def size(self) -> int:
        return self.tag_ids.shape[0]

    def validate(self) -> None:
        b, l, n = self.tag_ids.shape
        assert self.tag_mask.shape == (b, l, n)
        assert self.item_mask.shape == (b, l)
        assert self.domain_ids.shape == (b, l)
        if not np.all(self.item_mask.sum(axis=1) >= 1):
            raise ValueError("every batch row needs at least one unmasked item")
        if np.any(self.tag_ids[self.tag_mask == 0.0] != 0):
            raise ValueError("padding positions must carry tag id 0")


def make_batch(histories, catalog, n_cap: int, l_cap: int) -> SequenceBatch:
    """Build a SequenceBatch from item-id histories (most recent l kept)."""
    trimmed = [list(h)[-l_cap:] for h in histories]
    if any(len(h) == 0 for h in trimmed):
        raise ValueError("cannot batch an empty history")
    n = min(n_cap, max(len(catalog.items[i].tags) for h in trimmed for i in h))
    b = len(trimmed)
    tag_ids = np.zeros((b, l_cap, n), dtype=np.int64)
    tag_mask = np.zeros((b, l_cap, n))
    item_mask = np.zeros((b, l_cap))
    domain_ids = np.zeros((b, l_cap), dtype=np.int64)
    for r, hist in enumerate(trimmed):
        for p, item_id in enumerate(hist):
            item = catalog.items[item_id]
            tags = item.tags[:n]
            tag_ids[r, p, :len(tags)] = tags
            tag_mask[r, p, :len(tags)] = 1.0
            item_mask[r, p] = 1.0
            domain_ids[r, p] = item.domain
    return SequenceBatch(tag_ids=tag_ids, tag_mask=tag_mask, item_mask=item_mask,
                         domain_ids=domain_ids)


def embed_item(tag_ids, tag_mask, tables: dict, domain_id: int, training: bool = False) -> np.ndarray:
    """Mean of unmasked tag embeddings; domain embedding added when training."""
    ids = np.asarray(tag_ids, dtype=np.int64)
    mask = tensor(tag_mask)
    count = mask.sum()
    if count == 0:
        raise ValueError("embed_item: all tags are masked")
    out = (tables["emb/tags"][ids] * mask[:, None]).sum(axis=0) / count
    if training:
        out = out + tables["emb/domains"][domain_id]
    return out


def embed_sequence(tape: Tape, P: dict[str, Ref], batch: SequenceBatch,
                   training: bool, position_embeddings: bool = True) -> Ref:
    """(B, l, d) item embeddings for a padded sequence batch."""
    b, l, n = batch.tag_ids.shape
    tags = P["emb/tags"].gather_rows(batch.tag_ids)          # (B, l, n, d)
    mask = tape.leaf(batch.tag_mask[..., None])
    counts = batch.tag_mask.sum(axis=2)                       # (B, l)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    items = tags.mul(mask).sum(axis=2).mul(tape.leaf(inv[..., None]))
    if training:
        items = items + P["emb/domains"].gather_rows(batch.domain_ids)
    if position_embeddings and "emb/pos" in P:
        items = items + P["emb/pos"].gather_rows(np.arange(l))
    # zero padded positions so they can never leak through residual paths
    return items.mul(tape.leaf(batch.item_mask[..., None]))


def layer_norm(tape: Tape, x: Ref, gain: Ref, bias: Ref) -> Ref:
    mu = x.mean_last(keepdims=True)
    centered = x - mu
    var = centered.mul(centered).mean_last(keepdims=True)
    inv_std = (var + tape.leaf(LAYER_NORM_EPS)).log().scale(-0.5).exp()
    return centered.mul(inv_std).mul(gain) + bias


def relu(tape: Tape, x: Ref) -> Ref:
    neg = tape.leaf((x.value < 0.0).astype(np.float64))
    return x.masked_fill(neg, 0.0)


def stack_vectors(refs: list[Ref]) -> Ref:
    """[(B, d)] * m -> (B, m, d)."""
    tape = refs[0].tape
    b, d = refs[0].shape
    flat = tape.apply("concat_lastdim", refs)
    return flat.reshape((b, len(refs), d))


def encode_history(tape: Tape, P: dict[str, Ref], batch: SequenceBatch, heads: int,
                   training: bool = False, position_embeddings: bool = True) -> list[Ref]:
    """One causal self-attention block; returns m last-position head vectors."""
    batch.validate()
    b, l, _ = batch.tag_ids.shape
    d = P["emb/tags"].shape[1]
    emb = embed_sequence(tape, P, batch, training, position_embeddings)

    # disallow attention to padding and to future positions
    causal = np.tril(np.ones((l, l)))
    allowed = batch.item_mask[:, None, :] * causal[None, :, :]
    blocked = tape.leaf(1.0 - allowed)

    last_pos = batch.item_mask.sum(axis=1).astype(np.int64) - 1
    selector = np.zeros((b, 1, l))
    selector[np.arange(b), 0, last_pos] = 1.0
    sel = tape.leaf(selector)

    outs = []
    for h in range(heads):
        q = emb.matmul(P[f"attn/q{h}"])
        k = emb.matmul(P[f"attn/k{h}"])
        v = emb.matmul(P[f"attn/v{h}"])
        scores = q.matmul(k, transpose_b=True).scale(1.0 / np.sqrt(d))
        attn = scores.masked_fill(blocked, NEG_INF_FILL).softmax()
        x = layer_norm(tape, emb + attn.matmul(v), P["attn/ln1_g"], P["attn/ln1_b"])
        f = relu(tape, x.matmul(P["attn/ffn_w1"]) + P["attn/ffn_b1"])
        f = f.matmul(P["attn/ffn_w2"]) + P["attn/ffn_b2"]
        y = layer_norm(tape, x + f, P["attn/ln2_g"], P["attn/ln2_b"])
        outs.append(sel.matmul(y).reshape((b, d)))
    return outs


def weighted_aggregate(tape: Tape, vectors: list[Ref], wa_matrix: Ref) -> Ref:
    """Learned convex fusion: scores v_k . (M v_mean), softmax, weighted sum."""
    m = len(vectors)
    if m == 1:
        return vectors[0]
    b, d = vectors[0].shape
    mean = vectors[0]
    for v in vectors[1:]:
        mean = mean + v
    mean = mean.scale(1.0 / m)
    projected = mean.matmul(wa_matrix, transpose_b=True)      # (B, d) rows M v_mean
    scores = [v.mul(projected).sum(axis=-1, keepdims=True) for v in vectors]
    weights = tape.apply("concat_lastdim", scores).softmax()  # (B, m)
    stacked = stack_vectors(vectors)                          # (B, m, d)
    return weights.reshape((b, 1, m)).matmul(stacked).reshape((b, d))


def encode_content(tape: Tape, P: dict[str, Ref], batch: SequenceBatch, history: Ref) -> Ref:
    """Tag-frequency attention: history attends over all n*l tag positions."""
    b, l, n = batch.tag_ids.shape
    d = P["emb/tags"].shape[1]
    flat_ids = batch.tag_ids.reshape(b, l * n)
    flat_mask = batch.tag_mask.reshape(b, l * n)
    tags = P["emb/tags"].gather_rows(flat_ids)                      # (B, L, d)
    hidden = (tags.matmul(P["freq/w"], transpose_b=True) + P["freq/b"]).tanh()
    logits = hidden.mul(history.reshape((b, 1, d))).sum(axis=-1)    # (B, L)
    blocked = tape.leaf(1.0 - flat_mask)
    weights = logits.masked_fill(blocked, NEG_INF_FILL).softmax()
    return weights.reshape((b, 1, l * n)).matmul(tags).reshape((b, d))
