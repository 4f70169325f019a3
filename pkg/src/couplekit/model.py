"""End-to-end model: three-branch user encoding, FIFO-queue contrastive
training, Adam updates, and binary checkpoint persistence.

Training is deterministic given the run seed: every stochastic concern
(parameter init, Gumbel noise, dropout, batch sampling) draws from its
own seeded stream, and all streams are persisted in checkpoints so a
resumed run continues the identical trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .autodiff import Ref, Tape, backward, tensor
from .data import InteractionLog, ItemCatalog, training_pairs
from .encoder import (SequenceBatch, embed_sequence, encode_content, encode_history,
                      make_batch, weighted_aggregate)
from .memtree import (AnnealSchedule, MemoryTree, gumbel_noise, group_representation,
                      make_dropout_mask, ortho_penalty, propagate_weights, rank_topk,
                      selection_scores, temperature)
from .optim import AdamState, adam_step

CHECKPOINT_MAGIC = b"CPLKIT01"
ALL_BRANCHES = ("history", "content", "group")


@dataclass
class TrainConfig:
    d: int = 64
    heads: int = 4
    batch_size: int = 256
    epochs: int = 3
    lr: float = 1e-4
    omega: float = 0.03
    lam: float = 0.1
    top_k: int = 8
    n_cap: int = 15
    l_cap: int = 5
    seed: int = 0
    position_embeddings: bool = True
    tree_layers: tuple[int, ...] = (1, 32, 512)
    dropout: float = 0.2
    queue_capacity: int = 2560
    anneal_rate: float = 1e-5
    anneal_interval: int = 1000
    branches: tuple[str, ...] = ALL_BRANCHES

    def validate(self) -> None:
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        positives = (self.d, self.heads, self.batch_size, self.epochs, self.top_k,
                     self.n_cap, self.l_cap, self.queue_capacity)
        if any(v <= 0 for v in positives) or self.lr <= 0:
            raise ValueError("config counts and learning rate must be positive")
        if not self.branches or any(b not in ALL_BRANCHES for b in self.branches):
            raise ValueError(f"branches must be a non-empty subset of {ALL_BRANCHES}")

    def tree(self) -> MemoryTree:
        return MemoryTree(layer_sizes=tuple(self.tree_layers), dropout=self.dropout,
                          top_k=self.top_k)

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(rate=self.anneal_rate, interval=self.anneal_interval)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tree_layers"] = list(self.tree_layers)
        d["branches"] = list(self.branches)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["tree_layers"] = tuple(d["tree_layers"])
        d["branches"] = tuple(d["branches"])
        return cls(**d)


class RngHub:
    """One seeded stream per stochastic concern, all derived from one seed."""

    CONCERNS = ("init", "gumbel", "dropout", "sample")

    def __init__(self, seed: int) -> None:
        self.seed = seed
        self.streams = {
            name: np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
            for i, name in enumerate(self.CONCERNS)
        }

    def __getitem__(self, concern: str) -> np.random.Generator:
        return self.streams[concern]

    def state(self) -> dict:
        return {name: gen.bit_generator.state for name, gen in self.streams.items()}

    def set_state(self, state: dict) -> None:
        for name, s in state.items():
            self.streams[name].bit_generator.state = s


def init_params(catalog: ItemCatalog, cfg: TrainConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded uniform(-1/sqrt(d), 1/sqrt(d)) init for all learnable tensors."""
    d = cfg.d
    a = 1.0 / np.sqrt(d)

    def u(*shape):
        return rng.uniform(-a, a, size=shape)

    params: dict[str, np.ndarray] = {
        "emb/tags": u(catalog.num_tags, d),
        "emb/domains": u(catalog.num_domains, d),
        "attn/ln1_g": np.ones(d), "attn/ln1_b": np.zeros(d),
        "attn/ln2_g": np.ones(d), "attn/ln2_b": np.zeros(d),
        "attn/ffn_w1": u(d, d), "attn/ffn_b1": np.zeros(d),
        "attn/ffn_w2": u(d, d), "attn/ffn_b2": np.zeros(d),
        "wa/head_m": u(d, d),
        "wa/fusion_m": u(d, d),
        "freq/w": u(d, d), "freq/b": np.zeros(d),
    }
    if cfg.position_embeddings:
        params["emb/pos"] = u(cfg.l_cap, d)
    for h in range(cfg.heads):
        params[f"attn/q{h}"] = u(d, d)
        params[f"attn/k{h}"] = u(d, d)
        params[f"attn/v{h}"] = u(d, d)
    tree = cfg.tree()
    for name, size in zip(tree.slot_names(), tree.layer_sizes[1:]):
        params[name] = u(size, d)
    return params


class NegativeQueue:
    """Fixed-capacity FIFO ring of detached d-vectors."""

    def __init__(self, capacity: int, d: int) -> None:
        self.capacity = capacity
        self.buffer = np.zeros((capacity, d))
        self.head = 0  # next write position
        self.fill = 0

    def push(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape[0] > self.capacity:
            batch = batch[-self.capacity:]
        for row in batch:
            self.buffer[self.head] = row
            self.head = (self.head + 1) % self.capacity
        self.fill = min(self.capacity, self.fill + batch.shape[0])

    def contents(self) -> np.ndarray:
        """Queue entries oldest-first."""
        if self.fill < self.capacity:
            start = (self.head - self.fill) % self.capacity
            idx = (start + np.arange(self.fill)) % self.capacity
            return self.buffer[idx].copy()
        return np.concatenate([self.buffer[self.head:], self.buffer[:self.head]])


def leaf_params(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, Ref]:
    return {name: tape.leaf(value, param=True, name=name)
            for name, value in sorted(params.items())}


def embed_pos_items(tape: Tape, P: dict[str, Ref], tag_ids: np.ndarray,
                    tag_mask: np.ndarray, domain_ids: np.ndarray, training: bool) -> Ref:
    """(B, n) tag blocks -> (B, d) item embeddings, on-tape."""
    b, n = tag_ids.shape
    tags = P["emb/tags"].gather_rows(tag_ids)
    counts = tag_mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("positive item with all tags masked")
    out = tags.mul(tape.leaf(tag_mask[..., None])).sum(axis=1).mul(
        tape.leaf((1.0 / counts)[:, None]))
    if training:
        out = out + P["emb/domains"].gather_rows(domain_ids)
    return out


def user_forward(tape: Tape, P: dict[str, Ref], batch: SequenceBatch, cfg: TrainConfig,
                 *, train: bool, tau: float = 1.0, rng_hub: RngHub | None = None,
                 frozen: dict | None = None) -> Ref:
    """Final fused user representation (B, d).

    Train mode adds domain embeddings, ranks tree leaves through the
    Gumbel relaxation, and applies dropout to the group branch; infer mode
    is a pure function of (parameters, batch). `frozen` pins the noise and
    leaf selection for gradient checking.
    """
    cfg.validate()
    tree = cfg.tree()
    frozen = frozen or {}
    b = batch.size

    heads = encode_history(tape, P, batch, cfg.heads, training=train,
                           position_embeddings=cfg.position_embeddings)
    e_history = weighted_aggregate(tape, heads, P["wa/head_m"])

    branch_refs: dict[str, Ref] = {"history": e_history}
    if "content" in cfg.branches:
        branch_refs["content"] = encode_content(tape, P, batch, e_history)
    if "group" in cfg.branches:
        slots = [P[name] for name in tree.slot_names()]
        leaf_w = propagate_weights(tape, tree, slots, e_history)[-1]
        if train and "selection" in frozen:
            idx = frozen["selection"]
        elif train:
            noise = frozen.get("gumbel_noise")
            if noise is None:
                noise = gumbel_noise((b, tree.num_leaves), rng_hub["gumbel"])
            idx = rank_topk(selection_scores(leaf_w.value, tau, noise), tree.top_k)
        else:
            idx = rank_topk(leaf_w.value, tree.top_k)
        mask = None
        if train:
            mask = frozen.get("dropout_mask")
            if mask is None:
                mask = make_dropout_mask((b, cfg.d), tree.dropout, rng_hub["dropout"])
        branch_refs["group"] = group_representation(tape, slots[-1], leaf_w, idx,
                                                    dropout_mask=mask)

    ordered = [branch_refs[name] for name in cfg.branches if name in branch_refs]
    return weighted_aggregate(tape, ordered, P["wa/fusion_m"])


def contrastive_loss(tape: Tape, e_user: Ref, e_pos: Ref, negatives: np.ndarray,
                     omega: float) -> Ref:
    """Batch-mean InfoNCE over the positive plus detached queue negatives."""
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise ValueError("contrastive loss undefined with zero negatives")
    b = e_user.shape[0]
    inv_w = 1.0 / omega
    pos_logit = e_user.mul(e_pos).sum(axis=-1, keepdims=True).scale(inv_w)   # (B, 1)
    neg_logits = e_user.matmul(tape.leaf(negatives), transpose_b=True).scale(inv_w)
    logits = tape.apply("concat_lastdim", [pos_logit, neg_logits])           # (B, 1+F)
    shift = tape.leaf(logits.value.max(axis=-1, keepdims=True))  # constant; lse is shift-invariant
    lse = (logits - shift).exp().sum(axis=-1, keepdims=True).log() + shift
    per_row = lse - pos_logit
    return per_row.sum().scale(1.0 / b)


@dataclass
class StepResult:
    loss: float
    contrastive: float
    ortho: float


def _ortho_seed(run_seed: int, step: int) -> int:
    return int(np.random.SeedSequence(entropy=run_seed, spawn_key=(97, step)).generate_state(1)[0])


def train_step(params: dict[str, np.ndarray], adam: AdamState, queue: NegativeQueue,
               batch: SequenceBatch, pos: tuple[np.ndarray, np.ndarray, np.ndarray],
               step: int, cfg: TrainConfig, rng_hub: RngHub) -> tuple[dict[str, np.ndarray], StepResult]:
    """One training step: forward, total loss, backward, Adam, queue update."""
    tape = Tape()
    P = leaf_params(tape, params)
    tau = temperature(cfg.schedule(), step)
    e_user = user_forward(tape, P, batch, cfg, train=True, tau=tau, rng_hub=rng_hub)
    pos_ids, pos_mask, pos_domains = pos
    e_pos = embed_pos_items(tape, P, pos_ids, pos_mask, pos_domains, training=True)

    if queue.fill == 0:
        # warm-up: seed the queue with this batch's detached positives
        queue.push(e_pos.value)
    l_n = contrastive_loss(tape, e_user, e_pos, queue.contents(), cfg.omega)
    tree = cfg.tree()
    if cfg.lam > 0:
        # 32 power-iteration rounds: a loosely converged iterate makes the
        # penalty gradient target the true top singular direction; the
        # 2-round estimate is too diffuse to flatten the slot spectra
        l_o = ortho_penalty(tape, [P[n] for n in tree.slot_names()], cfg.lam,
                            seed=_ortho_seed(cfg.seed, step), iters=32)
        loss = l_n + l_o
        ortho_val = float(l_o.value)
    else:
        loss = l_n
        ortho_val = 0.0

    grads = backward(tape, loss)
    names = sorted(params)
    grad_list = [grads[P[n].idx] for n in names]
    updated = adam_step(adam, [params[n] for n in names], grad_list)
    new_params = dict(zip(names, updated))
    queue.push(e_pos.value)
    return new_params, StepResult(loss=float(loss.value), contrastive=float(l_n.value),
                                  ortho=ortho_val)


def make_train_batch(pairs, catalog: ItemCatalog, cfg: TrainConfig):
    """(SequenceBatch, positive tag block) for a list of training pairs."""
    histories = [h for _, h, _ in pairs]
    batch = make_batch(histories, catalog, cfg.n_cap, cfg.l_cap)
    n = min(cfg.n_cap, max(len(catalog.items[p].tags) for _, _, p in pairs))
    b = len(pairs)
    pos_ids = np.zeros((b, n), dtype=np.int64)
    pos_mask = np.zeros((b, n))
    pos_domains = np.zeros(b, dtype=np.int64)
    for r, (_, _, pos_item) in enumerate(pairs):
        tags = catalog.items[pos_item].tags[:n]
        pos_ids[r, :len(tags)] = tags
        pos_mask[r, :len(tags)] = 1.0
        pos_domains[r] = catalog.items[pos_item].domain
    return batch, (pos_ids, pos_mask, pos_domains)


class Trainer:
    """Owns all mutable training state; checkpointable at any step boundary.

    Batches are drawn by seeded sampling without replacement per step, so
    a resumed run consumes the identical batch sequence.
    """

    def __init__(self, catalog: ItemCatalog, cfg: TrainConfig) -> None:
        cfg.validate()
        self.catalog = catalog
        self.cfg = cfg
        self.rng = RngHub(cfg.seed)
        self.params = init_params(catalog, cfg, self.rng["init"])
        self.adam = AdamState.init([self.params[n] for n in sorted(self.params)], lr=cfg.lr)
        self.queue = NegativeQueue(cfg.queue_capacity, cfg.d)
        self.global_step = 0
        self.loss_log: list[StepResult] = []

    def steps_per_epoch(self, train_log: InteractionLog) -> int:
        pairs = training_pairs(train_log, self.cfg.l_cap)
        return max(1, int(np.ceil(len(pairs) / self.cfg.batch_size)))

    def run(self, train_log: InteractionLog, steps: int | None = None) -> list[StepResult]:
        """Train for `steps` steps (default: epochs * ceil(pairs / batch))."""
        pairs = training_pairs(train_log, self.cfg.l_cap)
        if not pairs:
            raise ValueError("no training pairs available")
        if steps is None:
            steps = self.cfg.epochs * self.steps_per_epoch(train_log)
        b = min(self.cfg.batch_size, len(pairs))
        results = []
        for _ in range(steps):
            idx = self.rng["sample"].choice(len(pairs), size=b, replace=False)
            batch, pos = make_train_batch([pairs[i] for i in idx], self.catalog, self.cfg)
            self.params, res = train_step(self.params, self.adam, self.queue, batch, pos,
                                          self.global_step, self.cfg, self.rng)
            self.global_step += 1
            self.loss_log.append(res)
            results.append(res)
        return results


class CheckpointError(ValueError):
    """Base class for malformed checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


def save_checkpoint(path: str, trainer: Trainer, meta: dict | None = None) -> None:
    """magic | u32 manifest length | JSON manifest | float64 LE payloads."""
    tensors: dict[str, np.ndarray] = dict(trainer.params)
    names = sorted(trainer.params)
    for i, name in enumerate(names):
        tensors[f"adam/m/{name}"] = trainer.adam.m[i]
        tensors[f"adam/v/{name}"] = trainer.adam.v[i]
    tensors["queue/buffer"] = trainer.queue.buffer

    order = sorted(tensors)
    offset = 0
    entries = {}
    for name in order:
        arr = tensors[name]
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * 8
    manifest = {
        "format_version": 1,
        "tensors": entries,
        "config": trainer.cfg.to_dict(),
        "adam": {"step": trainer.adam.step, "lr": trainer.adam.lr,
                 "beta1": trainer.adam.beta1, "beta2": trainer.adam.beta2,
                 "epsilon": trainer.adam.epsilon},
        "queue": {"capacity": trainer.queue.capacity, "head": trainer.queue.head,
                  "fill": trainer.queue.fill},
        "rng": trainer.rng.state(),
        "global_step": trainer.global_step,
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for name in order:
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path: str, catalog: ItemCatalog) -> Trainer:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: file too short for header")
    mlen = int.from_bytes(raw[8:12], "little")
    if len(raw) < 12 + mlen:
        raise TruncatedFileError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestMismatchError(f"{path}: unreadable manifest: {exc}") from None
    payload = raw[12 + mlen:]

    tensors: dict[str, np.ndarray] = {}
    total = 0
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + size * 8
        if end > len(payload):
            raise TruncatedFileError(f"{path}: tensor {name!r} extends past end of file")
        tensors[name] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
        total = max(total, end)
    if total != len(payload):
        raise ManifestMismatchError(f"{path}: payload size {len(payload)} != manifest total {total}")

    cfg = TrainConfig.from_dict(manifest["config"])
    trainer = Trainer.__new__(Trainer)
    trainer.catalog = catalog
    trainer.cfg = cfg
    trainer.rng = RngHub(cfg.seed)
    trainer.rng.set_state(manifest["rng"])
    param_names = [n for n in tensors if not n.startswith(("adam/", "queue/"))]
    trainer.params = {n: tensors[n] for n in sorted(param_names)}
    expected = set(init_params(catalog, cfg, np.random.default_rng(0)))
    if set(trainer.params) != expected:
        raise ManifestMismatchError(f"{path}: parameter set does not match the config")
    names = sorted(trainer.params)
    a = manifest["adam"]
    trainer.adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                             epsilon=a["epsilon"], step=a["step"],
                             m=[tensors[f"adam/m/{n}"] for n in names],
                             v=[tensors[f"adam/v/{n}"] for n in names])
    q = manifest["queue"]
    trainer.queue = NegativeQueue(q["capacity"], cfg.d)
    trainer.queue.buffer = tensors["queue/buffer"]
    trainer.queue.head = q["head"]
    trainer.queue.fill = q["fill"]
    trainer.global_step = manifest["global_step"]
    trainer.loss_log = []
    return trainer
