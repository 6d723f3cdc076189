"""Character n-gram TF-IDF indexing over table cells and entity-based retrieval.

Every non-empty table cell is one "document". Cells and claim entities are
embedded as sparse TF-IDF vectors over hashed n-grams; a table is scored for
a claim as the sum, over the claim's entities, of the best cosine match
between that entity and any cell of the table. The index is immutable once
built and safe for concurrent queries.

Conventions (the dot product of two identical strings is exactly 1):

* tf is the raw gram count within one cell,
* idf(g) = ln((N + 1) / (df(g) + 1)) + 1 with N the number of indexed cells
  and df the number of cells containing g (grams never seen in any cell fall
  out of the same formula with df = 0),
* every non-empty cell vector is L2-normalized.

Gram ids are 64-bit FNV-1a hashes of the gram string mixed with a fixed,
published seed; collisions are accepted (negligible below billions of
distinct grams).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from tabverify.corpus import Claim, Corpus

INDEX_FORMAT_VERSION = 1

#: Published seed mixed into the FNV-1a offset basis. Changing it invalidates
#: every persisted index and checkpoint.
GRAM_HASH_SEED = 0x7A8F1D3C9E5B2406

_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


@lru_cache(maxsize=1 << 20)
def hash_gram(gram: str, seed: int = GRAM_HASH_SEED) -> int:
    """Stable 64-bit FNV-1a hash of a gram string, mixed with ``seed``."""
    h = _FNV64_OFFSET ^ (seed & _MASK64)
    for byte in gram.encode("utf-8"):
        h ^= byte
        h = (h * _FNV64_PRIME) & _MASK64
    return h


def normalize(text: str) -> str:
    """Lowercase, collapse whitespace runs to single spaces, trim."""
    return " ".join(text.lower().split())


class Unit(str, Enum):
    """Tokenization granularity for TF-IDF vectors."""

    CHAR_GRAM = "char_gram"
    WORD = "word"
    WORD_GRAM = "word_gram"


class Strategy(str, Enum):
    """How claim text is matched against cells."""

    ENTITY_LEVEL = "entity_level"
    QUERY_LEVEL = "query_level"
    EXACT_MATCH = "exact_match"


@dataclass(frozen=True)
class IndexConfig:
    """Tokenization and scoring strategy for one index.

    ``gram_orders`` applies to the gram units (char_gram, word_gram); plain
    ``word`` splits on whitespace and ignores orders, and ``exact_match``
    compares whole normalized strings.
    """

    gram_orders: tuple[int, ...] = (2, 3)
    unit: Unit = Unit.CHAR_GRAM
    strategy: Strategy = Strategy.ENTITY_LEVEL

    def __post_init__(self) -> None:
        orders = tuple(sorted(set(int(n) for n in self.gram_orders)))
        object.__setattr__(self, "gram_orders", orders)
        object.__setattr__(self, "unit", Unit(self.unit))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.strategy is not Strategy.EXACT_MATCH:
            if not orders:
                raise ValueError("gram_orders must be non-empty for gram units")
            if any(n < 1 for n in orders):
                raise ValueError("gram orders must be >= 1")

    def to_dict(self) -> dict:
        return {
            "gram_orders": list(self.gram_orders),
            "unit": self.unit.value,
            "strategy": self.strategy.value,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "IndexConfig":
        return cls(
            gram_orders=tuple(obj["gram_orders"]),
            unit=Unit(obj["unit"]),
            strategy=Strategy(obj["strategy"]),
        )


def tokenize(text: str, config: IndexConfig) -> list[str]:
    """The multiset of grams of ``text`` under ``config``, as a list.

    Character grams are all contiguous substrings of each configured order
    over the normalized text (spaces included), word grams are contiguous
    word windows rejoined with single spaces, and plain words are the
    whitespace-split tokens. Empty or whitespace-only text yields nothing.
    """
    norm = normalize(text)
    if not norm:
        return []
    if config.unit is Unit.CHAR_GRAM:
        grams: list[str] = []
        for order in config.gram_orders:
            grams.extend(norm[i : i + order] for i in range(len(norm) - order + 1))
        return grams
    words = norm.split(" ")
    if config.unit is Unit.WORD:
        return words
    grams = []
    for order in config.gram_orders:
        grams.extend(
            " ".join(words[i : i + order]) for i in range(len(words) - order + 1)
        )
    return grams


@dataclass(frozen=True)
class TfIdfVector:
    """A sparse L2-normalized TF-IDF vector: gram id -> non-negative weight.

    ``entries`` is sorted by gram id so dot products accumulate in a fixed
    order regardless of how the vector was produced.
    """

    entries: tuple[tuple[int, float], ...]

    @property
    def norm(self) -> float:
        return float(np.sqrt(sum(w * w for _, w in self.entries)))

    def dot(self, other: "TfIdfVector") -> float:
        mine = dict(self.entries)
        total = 0.0
        for gram_id, weight in other.entries:
            w = mine.get(gram_id)
            if w is not None:
                total += w * weight
        return total

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class CellMatch:
    """Best-matching cell for one entity: provenance plus its cosine score."""

    column: int
    row: int
    score: float


@dataclass(frozen=True)
class ScoredTable:
    """One table's retrieval score for a claim.

    ``score`` is the sum of the per-entity best cell scores;
    ``per_entity_best`` holds one entry per claim entity (None when the
    entity matched nothing, contributing 0).
    """

    table_id: str
    score: float
    per_entity_best: tuple[CellMatch | None, ...] = ()


class CellIndex:
    """Immutable per-cell TF-IDF index over a corpus, grouped by table.

    Tables are stored sorted by id and cells row-major within each table, so
    the index content, every score, and every ranking are independent of the
    corpus insertion order.
    """

    def __init__(
        self,
        config: IndexConfig,
        table_ids: list[str],
        table_ptr: np.ndarray,
        cell_col: np.ndarray,
        cell_row: np.ndarray,
        cell_indptr: np.ndarray,
        cell_gram_ids: np.ndarray,
        cell_weights: np.ndarray,
        cell_texts: list[str],
        idf_gram_ids: np.ndarray,
        idf_values: np.ndarray,
        doc_count: int,
    ) -> None:
        self.config = config
        self.table_ids = table_ids
        self.table_ptr = table_ptr
        self.cell_col = cell_col
        self.cell_row = cell_row
        self.cell_indptr = cell_indptr
        self.cell_gram_ids = cell_gram_ids
        self.cell_weights = cell_weights
        self.cell_texts = cell_texts
        self.idf_gram_ids = idf_gram_ids
        self.idf_values = idf_values
        self.doc_count = doc_count
        self._table_pos = {tid: i for i, tid in enumerate(table_ids)}
        self._postings: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None
        self._exact: dict[str, np.ndarray] | None = None
        self._cell_owner: np.ndarray | None = None

    @property
    def n_tables(self) -> int:
        return len(self.table_ids)

    @property
    def n_cells(self) -> int:
        return len(self.cell_col)

    def table_index(self, table_id: str) -> int:
        try:
            return self._table_pos[table_id]
        except KeyError:
            raise KeyError(f"table {table_id!r} is not in the index") from None

    def idf(self, gram_id: int) -> float:
        """IDF weight for a gram id; unseen grams get the df = 0 smoothing."""
        pos = int(np.searchsorted(self.idf_gram_ids, np.uint64(gram_id)))
        if pos < len(self.idf_gram_ids) and int(self.idf_gram_ids[pos]) == gram_id:
            return float(self.idf_values[pos])
        return float(np.log((self.doc_count + 1) / 1.0) + 1.0)

    def vector(self, text: str) -> TfIdfVector:
        """The L2-normalized TF-IDF vector of arbitrary text (z(.))."""
        counts: dict[int, int] = {}
        for gram in tokenize(text, self.config):
            gid = hash_gram(gram)
            counts[gid] = counts.get(gid, 0) + 1
        if not counts:
            return TfIdfVector(entries=())
        items = sorted(counts.items())
        weights = np.array([tf * self.idf(gid) for gid, tf in items], dtype=np.float64)
        weights /= np.linalg.norm(weights)
        return TfIdfVector(entries=tuple((gid, float(w)) for (gid, _), w in zip(items, weights)))

    def cell_vector(self, cell_index: int) -> TfIdfVector:
        lo, hi = int(self.cell_indptr[cell_index]), int(self.cell_indptr[cell_index + 1])
        return TfIdfVector(
            entries=tuple(
                (int(g), float(w))
                for g, w in zip(self.cell_gram_ids[lo:hi], self.cell_weights[lo:hi])
            )
        )

    def table_cells(self, table_id: str) -> range:
        pos = self.table_index(table_id)
        return range(int(self.table_ptr[pos]), int(self.table_ptr[pos + 1]))

    def postings(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Inverted view (unique gram ids, offsets, cell ids, weights).

        Built lazily from the per-cell vectors; entries for one gram are
        contiguous and ordered by cell id.
        """
        if self._postings is None:
            counts = np.diff(self.cell_indptr)
            owner = np.repeat(np.arange(self.n_cells, dtype=np.int32), counts)
            order = np.argsort(self.cell_gram_ids, kind="stable")
            grams_sorted = self.cell_gram_ids[order]
            unique, offsets = np.unique(grams_sorted, return_index=True)
            offsets = np.append(offsets, len(grams_sorted)).astype(np.int64)
            self._postings = (
                unique,
                offsets,
                owner[order],
                self.cell_weights[order],
            )
        return self._postings

    def exact_lookup(self) -> dict[str, np.ndarray]:
        """Normalized cell text -> array of cell ids, built lazily."""
        if self._exact is None:
            groups: dict[str, list[int]] = {}
            for i, text in enumerate(self.cell_texts):
                groups.setdefault(text, []).append(i)
            self._exact = {t: np.array(ix, dtype=np.int64) for t, ix in groups.items()}
        return self._exact

    def cell_owner(self) -> np.ndarray:
        """Table index owning each cell, built lazily."""
        if self._cell_owner is None:
            counts = np.diff(self.table_ptr)
            self._cell_owner = np.repeat(
                np.arange(self.n_tables, dtype=np.int64), counts
            )
        return self._cell_owner


def build_index(corpus: Corpus, config: IndexConfig | None = None) -> CellIndex:
    """Index every non-empty cell of ``corpus`` as one TF-IDF document.

    Raises ``ValueError`` for an empty corpus or a corpus whose cells are all
    empty after normalization.
    """
    if config is None:
        config = IndexConfig()
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")

    table_ids = sorted(table.id for table in corpus)
    cell_col: list[int] = []
    cell_row: list[int] = []
    cell_texts: list[str] = []
    cell_grams: list[list[tuple[int, int]]] = []
    table_ptr = [0]
    df: dict[int, int] = {}

    use_vectors = config.strategy is not Strategy.EXACT_MATCH
    for table_id in table_ids:
        table = corpus[table_id]
        for r, row in enumerate(table.rows):
            for c, cell in enumerate(row):
                norm = normalize(cell)
                if not norm:
                    continue
                cell_col.append(c)
                cell_row.append(r)
                cell_texts.append(norm)
                if use_vectors:
                    counts: dict[int, int] = {}
                    for gram in tokenize(norm, config):
                        gid = hash_gram(gram)
                        counts[gid] = counts.get(gid, 0) + 1
                    items = sorted(counts.items())
                    cell_grams.append(items)
                    for gid, _ in items:
                        df[gid] = df.get(gid, 0) + 1
        table_ptr.append(len(cell_col))

    doc_count = len(cell_col)
    if doc_count == 0:
        raise ValueError("corpus contains no non-empty cells")

    idf_gram_ids = np.array(sorted(df.keys()), dtype=np.uint64)
    idf_values = np.array(
        [np.log((doc_count + 1) / (df[int(g)] + 1)) + 1.0 for g in idf_gram_ids],
        dtype=np.float64,
    )
    idf_map = {int(g): float(v) for g, v in zip(idf_gram_ids, idf_values)}

    indptr = [0]
    gram_ids: list[int] = []
    weights: list[float] = []
    if use_vectors:
        for items in cell_grams:
            vec = np.array([tf * idf_map[gid] for gid, tf in items], dtype=np.float64)
            vec /= np.linalg.norm(vec)
            gram_ids.extend(gid for gid, _ in items)
            weights.extend(vec.tolist())
            indptr.append(len(gram_ids))
    else:
        indptr = [0] * (doc_count + 1)

    return CellIndex(
        config=config,
        table_ids=table_ids,
        table_ptr=np.array(table_ptr, dtype=np.int64),
        cell_col=np.array(cell_col, dtype=np.int32),
        cell_row=np.array(cell_row, dtype=np.int32),
        cell_indptr=np.array(indptr, dtype=np.int64),
        cell_gram_ids=np.array(gram_ids, dtype=np.uint64),
        cell_weights=np.array(weights, dtype=np.float64),
        cell_texts=cell_texts,
        idf_gram_ids=idf_gram_ids,
        idf_values=idf_values,
        doc_count=doc_count,
    )


def _query_units(claim: Claim, config: IndexConfig) -> list[str]:
    """The strings scored against cells: entities, or the whole claim text."""
    if config.strategy is Strategy.QUERY_LEVEL:
        return [claim.text]
    return [span.surface for span in claim.entities]


def _segment_sum(values: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """Per-segment sum of ``values`` with 0 for empty segments."""
    out = np.zeros(len(ptr) - 1, dtype=np.float64)
    starts = ptr[:-1]
    nonempty = starts < ptr[1:]
    if nonempty.any():
        out[nonempty] = np.add.reduceat(values, starts[nonempty])
    return out


def _segment_max(values: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """Per-segment maximum of ``values`` with 0 for empty segments."""
    out = np.zeros(len(ptr) - 1, dtype=np.float64)
    starts = ptr[:-1]
    nonempty = starts < ptr[1:]
    if nonempty.any():
        out[nonempty] = np.maximum.reduceat(values, starts[nonempty])
    return out


def score_table(claim: Claim, table_id: str, index: CellIndex) -> ScoredTable:
    """Score one table for a claim: sum of per-entity best cell matches.

    For each entity the best-matching cell (ties broken by row-major cell
    order) is recorded for downstream column selection.
    """
    pos = index.table_index(table_id)
    lo, hi = int(index.table_ptr[pos]), int(index.table_ptr[pos + 1])
    exact = index.config.strategy is Strategy.EXACT_MATCH
    if not exact:
        grams_lo = int(index.cell_indptr[lo])
        grams_hi = int(index.cell_indptr[hi])
        grams = index.cell_gram_ids[grams_lo:grams_hi]
        weights = index.cell_weights[grams_lo:grams_hi]
        bounds = index.cell_indptr[lo : hi + 1] - grams_lo

    best: list[CellMatch | None] = []
    total = 0.0
    for unit in _query_units(claim, index.config):
        match: CellMatch | None = None
        if exact:
            norm = normalize(unit)
            if norm:
                for cell in range(lo, hi):
                    if index.cell_texts[cell] == norm:
                        match = CellMatch(
                            column=int(index.cell_col[cell]),
                            row=int(index.cell_row[cell]),
                            score=1.0,
                        )
                        break
        elif hi > lo:
            vec = index.vector(unit)
            if len(vec):
                ent_grams = np.array([g for g, _ in vec.entries], dtype=np.uint64)
                ent_weights = np.array([w for _, w in vec.entries], dtype=np.float64)
                idx = np.searchsorted(ent_grams, grams)
                idx_safe = np.minimum(idx, len(ent_grams) - 1)
                shared = ent_grams[idx_safe] == grams
                contrib = np.where(shared, weights * ent_weights[idx_safe], 0.0)
                cell_scores = _segment_sum(contrib, bounds)
                cell = int(np.argmax(cell_scores))
                if cell_scores[cell] > 0.0:
                    match = CellMatch(
                        column=int(index.cell_col[lo + cell]),
                        row=int(index.cell_row[lo + cell]),
                        score=float(cell_scores[cell]),
                    )
        best.append(match)
        if match is not None:
            total += match.score
    return ScoredTable(table_id=table_id, score=total, per_entity_best=tuple(best))


def score_all_tables(claim: Claim, index: CellIndex) -> np.ndarray:
    """Scores for every indexed table at once (the bulk path behind top-k).

    Uses the inverted postings to touch only cells sharing grams with the
    claim's entities; per-cell dot products accumulate in sorted-gram order,
    matching ``score_table`` term for term.
    """
    totals = np.zeros(index.n_tables, dtype=np.float64)
    exact = index.config.strategy is Strategy.EXACT_MATCH
    if exact:
        lookup = index.exact_lookup()
        cell_owner = index.cell_owner()
    else:
        unique, offsets, owners, weights = index.postings()
        cell_scores = np.zeros(index.n_cells, dtype=np.float64)

    for unit in _query_units(claim, index.config):
        if exact:
            cells = lookup.get(normalize(unit))
            if cells is not None and len(cells):
                totals[np.unique(cell_owner[cells])] += 1.0
            continue
        vec = index.vector(unit)
        if not len(vec):
            continue
        cell_scores.fill(0.0)
        for gid, w in vec.entries:
            pos = int(np.searchsorted(unique, np.uint64(gid)))
            if pos < len(unique) and int(unique[pos]) == gid:
                lo, hi = int(offsets[pos]), int(offsets[pos + 1])
                cell_scores[owners[lo:hi]] += w * weights[lo:hi]
        totals += _segment_max(cell_scores, index.table_ptr)
    return totals


def retrieve_topk(claim: Claim, index: CellIndex, k: int) -> list[ScoredTable]:
    """The ``min(k, corpus size)`` highest-scoring tables for a claim.

    Sorted by score descending with ties broken by table id ascending, so
    rankings are deterministic across runs, platforms, and corpus insertion
    orders. Each returned entry carries the per-entity best-cell detail.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    totals = score_all_tables(claim, index)
    k = min(k, index.n_tables)
    # Table ids are stored sorted ascending, so a stable sort on -score
    # realizes the id tie-break for free.
    order = np.argsort(-totals, kind="stable")[:k]
    return [score_table(claim, index.table_ids[int(pos)], index) for pos in order]


def rank_all(claim: Claim, index: CellIndex) -> list[tuple[str, float]]:
    """Full deterministic ranking of every table, as (table_id, score)."""
    totals = score_all_tables(claim, index)
    order = np.argsort(-totals, kind="stable")
    return [(index.table_ids[int(i)], float(totals[int(i)])) for i in order]


def save_index(index: CellIndex, path: str, extra_meta: dict | None = None) -> None:
    """Persist an index as a single binary file with embedded config/version."""
    meta = {
        "format_version": INDEX_FORMAT_VERSION,
        "config": index.config.to_dict(),
        "hash_seed": GRAM_HASH_SEED,
        "doc_count": index.doc_count,
        "table_ids": index.table_ids,
    }
    if extra_meta:
        meta.update(extra_meta)
    text_blob = "\x1f".join(index.cell_texts)
    with open(path, "wb") as handle:
        np.savez_compressed(
            handle,
            meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
            table_ptr=index.table_ptr,
            cell_col=index.cell_col,
            cell_row=index.cell_row,
            cell_indptr=index.cell_indptr,
            cell_gram_ids=index.cell_gram_ids,
            cell_weights=index.cell_weights,
            cell_texts=np.frombuffer(text_blob.encode("utf-8"), dtype=np.uint8),
            idf_gram_ids=index.idf_gram_ids,
            idf_values=index.idf_values,
        )


def load_index(path: str) -> CellIndex:
    """Load an index written by ``save_index``, checking format and seed."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta["format_version"] != INDEX_FORMAT_VERSION:
            raise ValueError(
                f"unsupported index format version {meta['format_version']}"
            )
        if meta["hash_seed"] != GRAM_HASH_SEED:
            raise ValueError("index was built with a different gram hash seed")
        blob = bytes(data["cell_texts"]).decode("utf-8")
        cell_texts = blob.split("\x1f") if blob else []
        doc_count = meta["doc_count"]
        if doc_count != len(cell_texts):
            raise ValueError("index cell count does not match stored texts")
        return CellIndex(
            config=IndexConfig.from_dict(meta["config"]),
            table_ids=list(meta["table_ids"]),
            table_ptr=data["table_ptr"],
            cell_col=data["cell_col"],
            cell_row=data["cell_row"],
            cell_indptr=data["cell_indptr"],
            cell_gram_ids=data["cell_gram_ids"],
            cell_weights=data["cell_weights"],
            cell_texts=cell_texts,
            idf_gram_ids=data["idf_gram_ids"],
            idf_values=data["idf_values"],
            doc_count=doc_count,
        )


def index_fingerprint(config: IndexConfig) -> str:
    """Short stable fingerprint of an index configuration, for lineage checks."""
    payload = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return f"{zlib.crc32(payload):08x}"
