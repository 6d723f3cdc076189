"""Cross-table multi-head attention over the k retrieved tables of one claim.

Each table's encoding attends to every retrieved table (itself included):

    logits[h][i, j] = (Wq[h] f_i) . (Wk[h] f_j) / sqrt(d)
    alpha[h]        = row-softmax(logits[h])
    a[h][i]         = sum_j alpha[h][i, j] (Wv[h] f_j)

and the contextualized representation is the concatenation
f*(d_i) = [f_i, a[1][i], ..., a[H][i]] of length 2n. The per-head width is
d = n / H so the head outputs together add exactly n; concatenation is the
final step (no output projection). The maps are pure linear (no biases).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tabverify.encoder import EncodedTable


@dataclass
class FusionParams:
    """Per-head query/key/value maps, each of shape (heads, n/heads, n)."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1]

    @property
    def in_dim(self) -> int:
        return self.wq.shape[2]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv}


@dataclass(frozen=True)
class FusedBatch:
    """Fused representations f* (k, 2n) and attention maps (heads, k, k).

    Every attention row is a softmax, hence row-stochastic.
    """

    fused: np.ndarray
    attention: np.ndarray


def init_fusion(n: int, n_heads: int, rng: np.random.Generator) -> FusionParams:
    """Uniform(-1/sqrt(n), 1/sqrt(n)) init; requires n divisible by n_heads."""
    if n_heads < 1:
        raise ValueError("n_heads must be >= 1")
    if n % n_heads != 0:
        raise ValueError(f"encoding width {n} is not divisible by {n_heads} heads")
    head_dim = n // n_heads
    bound = 1.0 / np.sqrt(n)

    def uniform() -> np.ndarray:
        return rng.uniform(-bound, bound, size=(n_heads, head_dim, n)).astype(np.float64)

    return FusionParams(wq=uniform(), wk=uniform(), wv=uniform())


def _as_matrix(encodings, in_dim: int) -> np.ndarray:
    if isinstance(encodings, np.ndarray):
        mat = np.asarray(encodings, dtype=np.float64)
    else:
        mat = np.stack([e.vector if isinstance(e, EncodedTable) else e for e in encodings])
    if mat.ndim != 2 or mat.shape[1] != in_dim:
        raise ValueError(
            f"encodings must form a (k, {in_dim}) matrix, got shape {mat.shape}"
        )
    if mat.shape[0] < 1:
        raise ValueError("need at least one encoding to fuse")
    return mat


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def fuse(encodings, params: FusionParams) -> FusedBatch:
    """Contextualize k table encodings against each other.

    ``encodings`` is a sequence of EncodedTable or a (k, n) array. Returns
    the concatenated representations (k, 2n) and per-head attention (H, k, k).
    """
    f = _as_matrix(encodings, params.in_dim)
    k = f.shape[0]
    scale = 1.0 / np.sqrt(params.head_dim)
    attention = np.empty((params.n_heads, k, k), dtype=np.float64)
    parts = [f]
    for h in range(params.n_heads):
        q = f @ params.wq[h].T
        key = f @ params.wk[h].T
        v = f @ params.wv[h].T
        attention[h] = _row_softmax(q @ key.T * scale)
        parts.append(attention[h] @ v)
    return FusedBatch(fused=np.concatenate(parts, axis=1), attention=attention)


@dataclass
class FusionGrads:
    """Parameter gradients matching FusionParams shapes."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray


def fuse_grad(
    encodings, params: FusionParams, upstream: np.ndarray
) -> tuple[FusionGrads, np.ndarray]:
    """Analytic gradients of ``fuse`` w.r.t. parameters and encodings.

    ``upstream`` is d(loss)/d(fused) of shape (k, 2n); returns parameter
    gradients plus d(loss)/d(encodings) of shape (k, n).
    """
    f = _as_matrix(encodings, params.in_dim)
    k, n = f.shape
    if upstream.shape != (k, 2 * n):
        raise ValueError(
            f"upstream gradient has shape {upstream.shape}, expected ({k}, {2 * n})"
        )
    scale = 1.0 / np.sqrt(params.head_dim)
    d = params.head_dim

    d_f = upstream[:, :n].copy()
    d_wq = np.zeros_like(params.wq)
    d_wk = np.zeros_like(params.wk)
    d_wv = np.zeros_like(params.wv)

    for h in range(params.n_heads):
        q = f @ params.wq[h].T
        key = f @ params.wk[h].T
        v = f @ params.wv[h].T
        alpha = _row_softmax(q @ key.T * scale)
        d_a = upstream[:, n + h * d : n + (h + 1) * d]

        d_v = alpha.T @ d_a
        d_alpha = d_a @ v.T
        # Softmax backward per row: dl = alpha * (d_alpha - <d_alpha, alpha>).
        inner = (d_alpha * alpha).sum(axis=1, keepdims=True)
        d_logits = alpha * (d_alpha - inner)
        d_q = d_logits @ key * scale
        d_key = d_logits.T @ q * scale

        d_wq[h] = d_q.T @ f
        d_wk[h] = d_key.T @ f
        d_wv[h] = d_v.T @ f
        d_f += d_q @ params.wq[h] + d_key @ params.wk[h] + d_v @ params.wv[h]

    return FusionGrads(wq=d_wq, wk=d_wk, wv=d_wv), d_f


def pad_unfused(encodings, n: int) -> FusedBatch:
    """The no-attention variant: f* = [f, 0], with uniform attention maps.

    Heads consuming the padded representation see exactly the raw encoding;
    the attention slot is filled with a single uniform map so summaries stay
    well-formed.
    """
    f = _as_matrix(encodings, n)
    k = f.shape[0]
    fused = np.concatenate([f, np.zeros_like(f)], axis=1)
    return FusedBatch(fused=fused, attention=np.full((1, k, k), 1.0 / k))
