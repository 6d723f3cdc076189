"""Output heads: joint reranking-and-verification, and ternary verification.

The joint head treats (evidence table, verdict) as a single categorical
variable: an MLP maps each fused representation to two logits and one softmax
runs over all 2k outcomes. The verdict and the table choice fall out of the
two marginalizations, and training minimizes one cross-entropy term per claim
against the (gold table, gold verdict) cell.

The ternary head classifies each table independently into {claim true, claim
false, table irrelevant}; training labels the gold table with the claim's
verdict and every other table irrelevant, averaging the cross-entropy over
the k tables. At inference the verdict compares total true mass against total
false mass.

During training the gold table is guaranteed present by replacing the
lowest-scored retrieved table whenever it was not retrieved (both losses need
a labeled gold row). Injection is forbidden outside training and counted, so
evaluations can prove it never fired.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tabverify.retriever import ScoredTable

#: Column layout of the joint head: p(s, v)[".", TRUE] and [".", FALSE].
TRUE, FALSE = 0, 1
#: Third ternary column: the table is irrelevant to the claim.
IRRELEVANT = 2

_MASS_TOL = 1e-9


@dataclass
class MlpParams:
    """One output MLP: linear to a tanh hidden layer, linear to logits."""

    w1: np.ndarray  # (hidden, in_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (out_dim, hidden)
    b2: np.ndarray  # (out_dim,)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class HeadParams:
    """Both output formulations over the same fused representations.

    ``joint`` maps to 2 logits (verdict given table), ``ternary`` to 3.
    A run trains one of them; both live in every checkpoint.
    """

    joint: MlpParams
    ternary: MlpParams


def _init_mlp(
    in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator
) -> MlpParams:
    def uniform(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float64)

    return MlpParams(
        w1=uniform((hidden, in_dim), in_dim),
        b1=np.zeros(hidden, dtype=np.float64),
        w2=uniform((out_dim, hidden), hidden),
        b2=np.zeros(out_dim, dtype=np.float64),
    )


def init_heads(fused_dim: int, hidden: int, rng: np.random.Generator) -> HeadParams:
    """Initialize both heads over fused inputs of width ``fused_dim`` (= 2n)."""
    return HeadParams(
        joint=_init_mlp(fused_dim, hidden, 2, rng),
        ternary=_init_mlp(fused_dim, hidden, 3, rng),
    )


@dataclass(frozen=True)
class HeadDropout:
    """Per-row inverted-dropout masks for one head MLP forward."""

    input_mask: np.ndarray  # (k, in_dim)
    hidden_mask: np.ndarray  # (k, hidden)


def sample_head_dropout(
    k: int, in_dim: int, hidden: int, rate: float, rng: np.random.Generator
) -> HeadDropout:
    keep = 1.0 - rate
    return HeadDropout(
        input_mask=(rng.random((k, in_dim)) < keep) / keep,
        hidden_mask=(rng.random((k, hidden)) < keep) / keep,
    )


def _as_fused(fused) -> np.ndarray:
    mat = fused.fused if hasattr(fused, "fused") else np.asarray(fused, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ValueError(f"fused input must be a (k, 2n) matrix, got {mat.shape}")
    return mat


def _mlp_logits(
    fused: np.ndarray, mlp: MlpParams, dropout: HeadDropout | None = None
) -> np.ndarray:
    x = fused * dropout.input_mask if dropout is not None else fused
    h = np.tanh(x @ mlp.w1.T + mlp.b1)
    hd = h * dropout.hidden_mask if dropout is not None else h
    logits = hd @ mlp.w2.T + mlp.b2
    if not np.all(np.isfinite(logits)):
        raise ValueError("head produced non-finite logits")
    return logits


@dataclass(frozen=True)
class JointDistribution:
    """One categorical over all (table, verdict) pairs: a (k, 2) table.

    Rows index tables, column 0 is "claim true", column 1 "claim false";
    the whole matrix sums to 1.
    """

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 2 or probs.shape[1] != 2 or probs.shape[0] < 1:
            raise ValueError(f"joint distribution must be (k, 2), got {probs.shape}")
        if probs.min() < 0.0:
            raise ValueError("joint distribution has negative entries")
        if abs(probs.sum() - 1.0) > _MASS_TOL:
            raise ValueError(f"joint distribution mass {probs.sum()} is not 1")

    @property
    def k(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class TernaryDistribution:
    """Per-table distributions over {true, false, irrelevant}: (k, 3) rows."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 2 or probs.shape[1] != 3 or probs.shape[0] < 1:
            raise ValueError(f"ternary distribution must be (k, 3), got {probs.shape}")
        if probs.min() < 0.0:
            raise ValueError("ternary distribution has negative entries")
        row_mass = probs.sum(axis=1)
        if np.abs(row_mass - 1.0).max() > _MASS_TOL:
            raise ValueError("ternary distribution rows do not sum to 1")

    @property
    def k(self) -> int:
        return self.probs.shape[0]


def _verdict_column(verdict: bool) -> int:
    return TRUE if verdict else FALSE


def joint_forward(
    fused, params: HeadParams, dropout: HeadDropout | None = None
) -> JointDistribution:
    """Single softmax over all 2k (table, verdict) logits."""
    logits = _mlp_logits(_as_fused(fused), params.joint, dropout)
    flat = logits.reshape(-1)
    shifted = np.exp(flat - flat.max())
    return JointDistribution(probs=(shifted / shifted.sum()).reshape(logits.shape))


def marginal_verdict(joint: JointDistribution) -> tuple[float, float]:
    """Marginalize the table choice away: (p_true, p_false)."""
    mass = joint.probs.sum(axis=0)
    return float(mass[TRUE]), float(mass[FALSE])


def marginal_rerank(joint: JointDistribution) -> np.ndarray:
    """Marginalize the verdict away: per-table relevance masses (k,)."""
    return joint.probs.sum(axis=1)


def joint_loss(joint: JointDistribution, gold_index: int, gold_verdict: bool) -> float:
    """Cross-entropy of the single gold (table, verdict) cell."""
    if not 0 <= gold_index < joint.k:
        raise IndexError(f"gold index {gold_index} out of range for k={joint.k}")
    with np.errstate(divide="ignore"):
        return float(-np.log(joint.probs[gold_index, _verdict_column(gold_verdict)]))


def ternary_forward(
    fused, params: HeadParams, dropout: HeadDropout | None = None
) -> TernaryDistribution:
    """Independent 3-way softmax per table row."""
    logits = _mlp_logits(_as_fused(fused), params.ternary, dropout)
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return TernaryDistribution(probs=shifted / shifted.sum(axis=1, keepdims=True))


def ternary_labels(k: int, gold_index: int, gold_verdict: bool) -> np.ndarray:
    """Training labels: the claim's verdict at the gold row, irrelevant elsewhere."""
    if not 0 <= gold_index < k:
        raise IndexError(f"gold index {gold_index} out of range for k={k}")
    labels = np.full(k, IRRELEVANT, dtype=np.int64)
    labels[gold_index] = _verdict_column(gold_verdict)
    return labels


def ternary_loss(
    dist: TernaryDistribution, gold_index: int, gold_verdict: bool
) -> float:
    """Mean cross-entropy over the k per-table rows."""
    labels = ternary_labels(dist.k, gold_index, gold_verdict)
    with np.errstate(divide="ignore"):
        return float(-np.log(dist.probs[np.arange(dist.k), labels]).mean())


def ternary_verdict(dist: TernaryDistribution) -> bool:
    """True iff total true mass strictly exceeds total false mass."""
    mass = dist.probs.sum(axis=0)
    return bool(mass[TRUE] > mass[FALSE])


def binary_forward(
    fused, params: HeadParams, dropout: HeadDropout | None = None
) -> TernaryDistribution:
    """Per-table binary softmax, realized by masking the irrelevant logit.

    This is the reranking-free variant (a uniform distribution over tables):
    each row distributes its mass over {true, false} only.
    """
    logits = _mlp_logits(_as_fused(fused), params.ternary, dropout)
    masked = logits.copy()
    masked[:, IRRELEVANT] = -np.inf
    shifted = np.exp(masked - masked.max(axis=1, keepdims=True))
    return TernaryDistribution(probs=shifted / shifted.sum(axis=1, keepdims=True))


def binary_loss(dist: TernaryDistribution, gold_index: int, gold_verdict: bool) -> float:
    """Cross-entropy of the gold row's verdict under the binary variant.

    With the table choice fixed to uniform, rows other than the gold one
    contribute only an additive constant, so just the gold row is scored.
    """
    if not 0 <= gold_index < dist.k:
        raise IndexError(f"gold index {gold_index} out of range for k={dist.k}")
    with np.errstate(divide="ignore"):
        return float(-np.log(dist.probs[gold_index, _verdict_column(gold_verdict)]))


@dataclass
class InjectionStats:
    """Counts every ``inject_gold`` call, and how many actually replaced."""

    calls: int = 0
    replacements: int = 0

    def reset(self) -> None:
        self.calls = 0
        self.replacements = 0


#: Process-wide injection instrumentation; reset before measuring a phase.
injection_stats = InjectionStats()


def inject_gold(
    retrieved: list[ScoredTable] | list[str],
    gold_id: str,
    training: bool = True,
) -> list[str]:
    """Guarantee the gold table appears in the candidate list (training only).

    If the gold table was retrieved the list is returned unchanged;
    otherwise the lowest-scored (last) entry is replaced by the gold table,
    preserving its position. Calling this outside training raises.
    """
    if not training:
        raise RuntimeError("gold injection is a training-time operation only")
    injection_stats.calls += 1
    ids = [t.table_id if isinstance(t, ScoredTable) else t for t in retrieved]
    if not ids:
        raise ValueError("cannot inject into an empty candidate list")
    if gold_id in ids:
        return ids
    injection_stats.replacements += 1
    return ids[:-1] + [gold_id]


@dataclass
class MlpGrads:
    """Gradients matching MlpParams shapes."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def _mlp_backward(
    fused: np.ndarray,
    mlp: MlpParams,
    d_logits: np.ndarray,
    dropout: HeadDropout | None = None,
) -> tuple[MlpGrads, np.ndarray]:
    x = fused * dropout.input_mask if dropout is not None else fused
    h = np.tanh(x @ mlp.w1.T + mlp.b1)
    hd = h * dropout.hidden_mask if dropout is not None else h

    d_w2 = d_logits.T @ hd
    d_b2 = d_logits.sum(axis=0)
    d_hd = d_logits @ mlp.w2
    d_h = d_hd * dropout.hidden_mask if dropout is not None else d_hd
    d_z1 = d_h * (1.0 - h * h)
    d_w1 = d_z1.T @ x
    d_b1 = d_z1.sum(axis=0)
    d_x = d_z1 @ mlp.w1
    d_fused = d_x * dropout.input_mask if dropout is not None else d_x
    return MlpGrads(w1=d_w1, b1=d_b1, w2=d_w2, b2=d_b2), d_fused


def joint_backward(
    fused,
    params: HeadParams,
    gold_index: int,
    gold_verdict: bool,
    dropout: HeadDropout | None = None,
) -> tuple[float, MlpGrads, np.ndarray]:
    """Loss, head-parameter gradients, and d(loss)/d(fused) for the joint head."""
    mat = _as_fused(fused)
    logits = _mlp_logits(mat, params.joint, dropout)
    flat = logits.reshape(-1)
    shift = flat.max()
    log_z = shift + np.log(np.exp(flat - shift).sum())
    gold_flat = gold_index * 2 + _verdict_column(gold_verdict)
    if not 0 <= gold_index < mat.shape[0]:
        raise IndexError(f"gold index {gold_index} out of range for k={mat.shape[0]}")
    loss = float(log_z - flat[gold_flat])
    d_flat = np.exp(flat - log_z)
    d_flat[gold_flat] -= 1.0
    grads, d_fused = _mlp_backward(mat, params.joint, d_flat.reshape(logits.shape), dropout)
    return loss, grads, d_fused


def ternary_backward(
    fused,
    params: HeadParams,
    gold_index: int,
    gold_verdict: bool,
    dropout: HeadDropout | None = None,
) -> tuple[float, MlpGrads, np.ndarray]:
    """Loss, gradients, and d(loss)/d(fused) for the ternary head."""
    mat = _as_fused(fused)
    k = mat.shape[0]
    logits = _mlp_logits(mat, params.ternary, dropout)
    labels = ternary_labels(k, gold_index, gold_verdict)
    shift = logits.max(axis=1, keepdims=True)
    log_z = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    loss = float((log_z - logits[np.arange(k), labels]).mean())
    d_logits = np.exp(logits - log_z[:, None])
    d_logits[np.arange(k), labels] -= 1.0
    d_logits /= k
    grads, d_fused = _mlp_backward(mat, params.ternary, d_logits, dropout)
    return loss, grads, d_fused


def binary_backward(
    fused,
    params: HeadParams,
    gold_index: int,
    gold_verdict: bool,
    dropout: HeadDropout | None = None,
) -> tuple[float, MlpGrads, np.ndarray]:
    """Loss, gradients, and d(loss)/d(fused) for the binary (uniform) variant."""
    mat = _as_fused(fused)
    k = mat.shape[0]
    if not 0 <= gold_index < k:
        raise IndexError(f"gold index {gold_index} out of range for k={k}")
    logits = _mlp_logits(mat, params.ternary, dropout)
    pair = logits[gold_index, :IRRELEVANT]
    shift = pair.max()
    log_z = shift + np.log(np.exp(pair - shift).sum())
    col = _verdict_column(gold_verdict)
    loss = float(log_z - pair[col])
    d_logits = np.zeros_like(logits)
    d_logits[gold_index, :IRRELEVANT] = np.exp(pair - log_z)
    d_logits[gold_index, col] -= 1.0
    grads, d_fused = _mlp_backward(mat, params.ternary, d_logits, dropout)
    return loss, grads, d_fused
