"""Mini-batch gradient training of encoder + fusion + head, and evaluation.

One training example is a claim with its top-k retrieved tables, the gold
table injected if missing. Each table is linearised and encoded, the
encodings are fused (or zero-padded when attention is ablated), and the
selected head produces the per-claim loss. Updates use adaptive moment
estimation with bias correction and a linear warmup / linear decay schedule.
Everything is float64 and deterministic under a fixed seed: same seed, same
data, bitwise-identical checkpoints.

Evaluation runs the same pipeline without gold injection and without dropout,
reporting verdict accuracy and, for the joint head, reranked Hits@k.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from tabverify import encoder as enc
from tabverify import fusion as fus
from tabverify import heads
from tabverify.corpus import Claim, Corpus
from tabverify.linearizer import linearize, select_columns
from tabverify.retriever import (
    CellIndex,
    ScoredTable,
    index_fingerprint,
    rank_all,
    retrieve_topk,
    score_table,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

HEAD_KINDS = ("joint", "ternary", "binary")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture: encoder shapes, attention heads, head MLP width."""

    encode_dim: int = 64
    embed_dim: int = 64
    hash_buckets: int = 2**15
    encoder_hidden: int = 128
    head_hidden: int = 128
    attention_heads: int = 2
    gram_orders: tuple[int, ...] = (2, 3)
    use_attention: bool = True
    dropout: float = 0.1
    max_rows: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "gram_orders", tuple(sorted(set(self.gram_orders))))
        if self.encode_dim % self.attention_heads != 0:
            raise ValueError("encode_dim must be divisible by attention_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def encoder_config(self) -> enc.EncoderConfig:
        return enc.EncoderConfig(
            hash_buckets=self.hash_buckets,
            embed_dim=self.embed_dim,
            hidden_dim=self.encoder_hidden,
            out_dim=self.encode_dim,
            gram_orders=self.gram_orders,
        )

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        """Head sizing of the published large-scale setup (3072 hidden units).

        The encoder stays the reference hashed-gram one; a pretrained
        transformer would replace it through the encoder interface.
        """
        base = dict(head_hidden=3072)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "encode_dim": self.encode_dim,
            "embed_dim": self.embed_dim,
            "hash_buckets": self.hash_buckets,
            "encoder_hidden": self.encoder_hidden,
            "head_hidden": self.head_hidden,
            "attention_heads": self.attention_heads,
            "gram_orders": list(self.gram_orders),
            "use_attention": self.use_attention,
            "dropout": self.dropout,
            "max_rows": self.max_rows,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["gram_orders"] = tuple(obj["gram_orders"])
        return cls(**obj)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization regime. Defaults are desk scale; see ``paper_scale``.

    The paper-scale values (learning rate 5e-6, 30000 warmup batches, batch
    size 32) target a large pretrained encoder on multi-GPU hardware and
    remain selectable; desk-scale defaults train the reference encoder in
    seconds.
    """

    learning_rate: float = 1e-3
    warmup_batches: int = 100
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    k: int = 3
    head: str = "joint"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if min(self.learning_rate, self.batch_size, self.k) <= 0:
            raise ValueError("learning_rate, batch_size, and k must be positive")
        if self.warmup_batches < 0 or self.epochs < 0:
            raise ValueError("warmup_batches and epochs must be non-negative")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(learning_rate=5e-6, warmup_batches=30000, batch_size=32)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "warmup_batches": self.warmup_batches,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "k": self.k,
            "head": self.head,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class Model:
    """All trainable parameters plus the architecture that shaped them."""

    config: ModelConfig
    encoder: enc.EncoderParams
    fusion: fus.FusionParams
    heads: heads.HeadParams


def init_model(config: ModelConfig, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    return Model(
        config=config,
        encoder=enc.init_encoder(config.encoder_config(), rng),
        fusion=fus.init_fusion(config.encode_dim, config.attention_heads, rng),
        heads=heads.init_heads(2 * config.encode_dim, config.head_hidden, rng),
    )


def model_tensors(model: Model) -> dict[str, np.ndarray]:
    """Flat name -> array view of every parameter (shared, not copied)."""
    out: dict[str, np.ndarray] = {}
    for name, arr in model.encoder.tensors().items():
        out[f"encoder.{name}"] = arr
    for name, arr in model.fusion.tensors().items():
        out[f"fusion.{name}"] = arr
    for name, arr in model.heads.joint.tensors().items():
        out[f"head.joint.{name}"] = arr
    for name, arr in model.heads.ternary.tensors().items():
        out[f"head.ternary.{name}"] = arr
    return out


def trainable_names(config: ModelConfig, head: str) -> list[str]:
    names = [f"encoder.{n}" for n in ("embedding", "w1", "b1", "w2", "b2")]
    if config.use_attention:
        names += [f"fusion.{n}" for n in ("wq", "wk", "wv")]
    if head == "joint":
        names += [f"head.joint.{n}" for n in ("w1", "b1", "w2", "b2")]
    else:
        names += [f"head.ternary.{n}" for n in ("w1", "b1", "w2", "b2")]
    return names


def copy_model(model: Model) -> Model:
    return Model(
        config=model.config,
        encoder=replace(
            model.encoder, **{k: v.copy() for k, v in model.encoder.tensors().items()}
        ),
        fusion=replace(
            model.fusion, **{k: v.copy() for k, v in model.fusion.tensors().items()}
        ),
        heads=heads.HeadParams(
            joint=replace(
                model.heads.joint,
                **{k: v.copy() for k, v in model.heads.joint.tensors().items()},
            ),
            ternary=replace(
                model.heads.ternary,
                **{k: v.copy() for k, v in model.heads.ternary.tensors().items()},
            ),
        ),
    )


@dataclass
class Checkpoint:
    """A full training snapshot: parameters, configs, counters, RNG state."""

    model: Model
    train_config: TrainConfig
    rng_state: dict
    epoch: int
    step: int
    index_fingerprint: str
    dev_accuracy: float | None = None


def save_checkpoint(
    checkpoint: Checkpoint, path: str, extra_meta: dict | None = None
) -> None:
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": checkpoint.model.config.to_dict(),
        "train_config": checkpoint.train_config.to_dict(),
        "rng_state": checkpoint.rng_state,
        "epoch": checkpoint.epoch,
        "step": checkpoint.step,
        "index_fingerprint": checkpoint.index_fingerprint,
        "dev_accuracy": checkpoint.dev_accuracy,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {
        f"param::{name}": arr for name, arr in model_tensors(checkpoint.model).items()
    }
    with open(path, "wb") as handle:
        np.savez(
            handle,
            meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
            **arrays,
        )


def load_checkpoint(path: str) -> Checkpoint:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format version {meta['format_version']}"
            )
        model = init_model(
            ModelConfig.from_dict(meta["model_config"]), seed=0
        )
        for name, arr in model_tensors(model).items():
            arr[...] = data[f"param::{name}"]
    return Checkpoint(
        model=model,
        train_config=TrainConfig.from_dict(meta["train_config"]),
        rng_state=meta["rng_state"],
        epoch=meta["epoch"],
        step=meta["step"],
        index_fingerprint=meta["index_fingerprint"],
        dev_accuracy=meta["dev_accuracy"],
    )


@dataclass
class TrainExample:
    """A fully preprocessed claim: hashed features per candidate table."""

    claim_id: str
    table_ids: list[str]
    features: list[tuple[np.ndarray, np.ndarray]]
    gold_index: int
    label: bool


def _table_features(
    claim: Claim,
    scored: ScoredTable,
    corpus: Corpus,
    config: ModelConfig,
) -> tuple[np.ndarray, np.ndarray]:
    table = corpus[scored.table_id]
    kept = select_columns(scored, table)
    lin = linearize(claim, table, kept, max_rows=config.max_rows)
    return enc.text_features(lin.text, config.encoder_config())


def prepare_training_examples(
    claims: list[Claim],
    corpus: Corpus,
    index: CellIndex,
    k: int,
    config: ModelConfig,
) -> tuple[list[TrainExample], int]:
    """Retrieve, inject gold, linearise, and hash every trainable claim.

    Claims without a gold table or label, or whose gold id is missing from
    the corpus, are skipped and counted.
    """
    examples: list[TrainExample] = []
    skipped = 0
    for claim in claims:
        if claim.gold_table_id is None or claim.label is None:
            skipped += 1
            continue
        if claim.gold_table_id not in corpus:
            skipped += 1
            continue
        ranked = retrieve_topk(claim, index, k)
        ids = heads.inject_gold(ranked, claim.gold_table_id, training=True)
        by_id = {s.table_id: s for s in ranked}
        features = []
        for tid in ids:
            scored = by_id.get(tid)
            if scored is None:
                scored = score_table(claim, tid, index)
            features.append(_table_features(claim, scored, corpus, config))
        examples.append(
            TrainExample(
                claim_id=claim.id,
                table_ids=ids,
                features=features,
                gold_index=ids.index(claim.gold_table_id),
                label=claim.label,
            )
        )
    if skipped:
        logger.warning("skipped %d claims without usable gold table / label", skipped)
    return examples, skipped


_BACKWARD = {
    "joint": heads.joint_backward,
    "ternary": heads.ternary_backward,
    "binary": heads.binary_backward,
}


def example_gradients(
    model: Model,
    example: TrainExample,
    head: str,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients of one claim under the selected head.

    Passing an RNG enables dropout at the model's configured rate; without
    one the pass is deterministic.
    """
    config = model.config
    k = len(example.features)
    drop = config.dropout if rng is not None and config.dropout > 0 else 0.0

    enc_masks = []
    encodings = np.empty((k, config.encode_dim), dtype=np.float64)
    for i, (buckets, counts) in enumerate(example.features):
        mask = (
            enc.sample_dropout(config.encoder_config(), drop, rng) if drop else None
        )
        enc_masks.append(mask)
        encodings[i] = enc.encode_features(buckets, counts, model.encoder, mask)

    if config.use_attention:
        fused = fus.fuse(encodings, model.fusion)
    else:
        fused = fus.pad_unfused(encodings, config.encode_dim)

    head_mask = (
        heads.sample_head_dropout(
            k, 2 * config.encode_dim, config.head_hidden, drop, rng
        )
        if drop
        else None
    )
    loss, head_grads, d_fused = _BACKWARD[head](
        fused.fused, model.heads, example.gold_index, example.label, head_mask
    )

    grads: dict[str, np.ndarray] = {}
    prefix = "head.joint" if head == "joint" else "head.ternary"
    for name, arr in head_grads.__dict__.items():
        grads[f"{prefix}.{name}"] = arr

    if config.use_attention:
        fusion_grads, d_enc = fus.fuse_grad(encodings, model.fusion, d_fused)
        grads["fusion.wq"] = fusion_grads.wq
        grads["fusion.wk"] = fusion_grads.wk
        grads["fusion.wv"] = fusion_grads.wv
    else:
        d_enc = d_fused[:, : config.encode_dim]

    emb = np.zeros_like(model.encoder.embedding)
    for name in ("w1", "b1", "w2", "b2"):
        grads[f"encoder.{name}"] = np.zeros_like(getattr(model.encoder, name))
    for i, (buckets, counts) in enumerate(example.features):
        g = enc.encode_grad_features(
            buckets, counts, model.encoder, d_enc[i], enc_masks[i]
        )
        np.add.at(emb, g.embedding_buckets, g.embedding_rows)
        grads["encoder.w1"] += g.w1
        grads["encoder.b1"] += g.b1
        grads["encoder.w2"] += g.w2
        grads["encoder.b2"] += g.b2
    grads["encoder.embedding"] = emb
    return loss, grads


def batch_gradients(
    model: Model,
    batch: list[TrainExample],
    head: str,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and mean gradients over a batch, in a fixed order."""
    total_loss = 0.0
    acc: dict[str, np.ndarray] = {}
    for example in batch:
        loss, grads = example_gradients(model, example, head, rng)
        total_loss += loss
        for name, g in grads.items():
            if name in acc:
                acc[name] += g
            else:
                acc[name] = g
    scale = 1.0 / len(batch)
    for g in acc.values():
        g *= scale
    return total_loss * scale, acc


class Adam:
    """Adaptive moment estimation with bias correction, float64 state."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in params.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in params.items()}

    def step(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
    ) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name in self.m:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def schedule_lr(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to the base rate, then linear decay toward zero."""
    warmup = min(config.warmup_batches, total_steps)
    if warmup and step <= warmup:
        return config.learning_rate * step / warmup
    remaining = total_steps + 1 - warmup
    return config.learning_rate * (total_steps + 1 - step) / remaining


def train(
    claims: list[Claim],
    corpus: Corpus,
    index: CellIndex,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    dev_claims: list[Claim] | None = None,
    on_step=None,
) -> Checkpoint:
    """Train the selected head end to end and return the resulting snapshot.

    When ``dev_claims`` is given, the model is evaluated after every epoch
    (without injection) and the parameters with the best dev accuracy are the
    ones returned; otherwise the final parameters are. ``on_step`` receives
    ``{"step", "loss", "lr"}`` after every optimizer step.
    """
    if model_config is None:
        model_config = ModelConfig()
    model = init_model(model_config, config.seed)
    rng = np.random.default_rng(config.seed + 1)

    examples, _ = prepare_training_examples(claims, corpus, index, config.k, model_config)
    if not examples and config.epochs > 0:
        raise ValueError("no trainable claims (need gold_table_id and label)")

    params = {
        name: arr
        for name, arr in model_tensors(model).items()
        if name in set(trainable_names(model_config, config.head))
    }
    optimizer = Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)

    n_batches = (
        (len(examples) + config.batch_size - 1) // config.batch_size if examples else 0
    )
    total_steps = n_batches * config.epochs
    step = 0
    best: tuple[float, Model] | None = None

    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(examples), config.batch_size):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            loss, grads = batch_gradients(model, batch, config.head, rng)
            step += 1
            lr = schedule_lr(step, total_steps, config)
            optimizer.step(params, grads, lr)
            if on_step is not None:
                on_step({"step": step, "loss": loss, "lr": lr})
        if dev_claims is not None:
            snapshot = Checkpoint(
                model=model,
                train_config=config,
                rng_state=rng.bit_generator.state,
                epoch=epoch + 1,
                step=step,
                index_fingerprint=index_fingerprint(index.config),
            )
            report = evaluate_checkpoint(snapshot, dev_claims, corpus, index)
            if best is None or report.accuracy > best[0]:
                best = (report.accuracy, copy_model(model))

    final_model = model if best is None else best[1]
    return Checkpoint(
        model=final_model,
        train_config=config,
        rng_state=rng.bit_generator.state,
        epoch=config.epochs,
        step=step,
        index_fingerprint=index_fingerprint(index.config),
        dev_accuracy=None if best is None else best[0],
    )


@dataclass
class PredictionRecord:
    """One claim's inference outcome, with everything analysis needs."""

    claim_id: str
    table_ids: tuple[str, ...]
    verdict: bool
    correct: bool | None
    p_true: float
    rerank: tuple[float, ...] | None
    per_table: tuple[tuple[float, ...], ...] | None
    attention: np.ndarray | None
    gold_table_id: str | None
    gold_rank: int | None
    gold_in_retrieved: bool


@dataclass
class EvalReport:
    """Aggregate inference metrics plus the per-claim records behind them."""

    accuracy: float
    n_evaluated: int
    n_skipped: int
    head: str
    reranked_hits: dict[int, float] | None
    records: list[PredictionRecord]


def predict_claim(
    model: Model,
    head: str,
    claim: Claim,
    table_ids: list[str],
    scored_by_id: dict[str, ScoredTable],
    corpus: Corpus,
) -> PredictionRecord:
    """Deterministic inference for one claim over the given candidate tables."""
    config = model.config
    encodings = np.empty((len(table_ids), config.encode_dim), dtype=np.float64)
    for i, tid in enumerate(table_ids):
        buckets, counts = _table_features(claim, scored_by_id[tid], corpus, config)
        encodings[i] = enc.encode_features(buckets, counts, model.encoder)
    if config.use_attention:
        fused = fus.fuse(encodings, model.fusion)
    else:
        fused = fus.pad_unfused(encodings, config.encode_dim)

    rerank: tuple[float, ...] | None = None
    per_table: tuple[tuple[float, ...], ...] | None = None
    if head == "joint":
        dist = heads.joint_forward(fused.fused, model.heads)
        p_true, p_false = heads.marginal_verdict(dist)
        verdict = p_true > p_false
        rerank = tuple(float(x) for x in heads.marginal_rerank(dist))
    else:
        forward = heads.ternary_forward if head == "ternary" else heads.binary_forward
        dist = forward(fused.fused, model.heads)
        mass = dist.probs.sum(axis=0)
        p_true = float(mass[heads.TRUE] / (mass[heads.TRUE] + mass[heads.FALSE]))
        verdict = heads.ternary_verdict(dist)
        per_table = tuple(tuple(float(x) for x in row) for row in dist.probs)

    correct = None if claim.label is None else verdict == claim.label
    return PredictionRecord(
        claim_id=claim.id,
        table_ids=tuple(table_ids),
        verdict=verdict,
        correct=correct,
        p_true=float(p_true),
        rerank=rerank,
        per_table=per_table,
        attention=fused.attention if config.use_attention else None,
        gold_table_id=claim.gold_table_id,
        gold_rank=None,
        gold_in_retrieved=claim.gold_table_id is not None
        and claim.gold_table_id in table_ids,
    )


def reranked_ids(record: PredictionRecord) -> list[str]:
    """Candidate tables reordered by the joint head's relevance marginal.

    Stable in the original retrieval order, so equal masses keep the
    retriever's ranking.
    """
    if record.rerank is None:
        raise ValueError("record has no reranking masses (not a joint-head run)")
    order = np.argsort(-np.asarray(record.rerank), kind="stable")
    return [record.table_ids[int(i)] for i in order]


def evaluate_checkpoint(
    checkpoint: Checkpoint,
    claims: list[Claim],
    corpus: Corpus,
    index: CellIndex,
    k: int | None = None,
    oracle: bool = False,
    compute_gold_rank: bool = False,
) -> EvalReport:
    """Run inference (never injecting gold) and aggregate verdict metrics.

    ``oracle=True`` evaluates the closed setting: the candidate set is just
    the gold table. ``compute_gold_rank`` additionally ranks the full corpus
    per claim to report where retrieval placed the gold table.
    """
    model = checkpoint.model
    head = checkpoint.train_config.head
    if k is None:
        k = checkpoint.train_config.k

    records: list[PredictionRecord] = []
    n_correct = 0
    n_labeled = 0
    n_skipped = 0
    for claim in claims:
        if oracle:
            if claim.gold_table_id is None or claim.gold_table_id not in corpus:
                n_skipped += 1
                continue
            scored = score_table(claim, claim.gold_table_id, index)
            table_ids = [claim.gold_table_id]
            by_id = {claim.gold_table_id: scored}
        else:
            ranked = retrieve_topk(claim, index, k)
            table_ids = [s.table_id for s in ranked]
            by_id = {s.table_id: s for s in ranked}
        record = predict_claim(model, head, claim, table_ids, by_id, corpus)
        if compute_gold_rank and claim.gold_table_id is not None:
            full = rank_all(claim, index)
            ranks = {tid: pos + 1 for pos, (tid, _) in enumerate(full)}
            record.gold_rank = ranks.get(claim.gold_table_id)
        if record.correct is not None:
            n_labeled += 1
            n_correct += int(record.correct)
        records.append(record)

    reranked: dict[int, float] | None = None
    if head == "joint" and not oracle:
        eligible = [
            r for r in records if r.rerank is not None and r.gold_table_id is not None
        ]
        if eligible:
            reranked = {}
            for depth in range(1, k + 1):
                hits = sum(
                    1 for r in eligible if r.gold_table_id in reranked_ids(r)[:depth]
                )
                reranked[depth] = hits / len(eligible)

    return EvalReport(
        accuracy=n_correct / n_labeled if n_labeled else 0.0,
        n_evaluated=n_labeled,
        n_skipped=n_skipped,
        head=head,
        reranked_hits=reranked,
        records=records,
    )
