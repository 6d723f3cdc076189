"""Claim-aware textual flattening of tables.

A (claim, table) pair becomes one string: the claim, a separator token, then
every table row rendered as "row r is : header is cell ; ... ." restricted to
the columns where the claim's entities matched best. Both operations are pure
and byte-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

from tabverify.corpus import Claim, Table
from tabverify.retriever import ScoredTable

#: Maximum number of table columns kept in a linearisation.
COLUMN_KEEP_LIMIT = 3

#: Literal token marking the claim/table boundary, independent of encoder.
SEPARATOR = " </s> "


@dataclass(frozen=True)
class Linearisation:
    """The rendered text for one (claim, table) pair.

    ``kept_columns`` are the column indices that survived pruning, ascending;
    ``text`` always begins with the claim text.
    """

    text: str
    kept_columns: tuple[int, ...]
    source_table_id: str


def select_columns(scored: ScoredTable, table: Table) -> list[int]:
    """Columns to keep for linearisation, in original left-to-right order.

    Each column is ranked by the best per-entity cell score achieved in it
    (an entity "achieves" its score at its single best-matching cell). The
    top ``COLUMN_KEEP_LIMIT`` columns are kept; ties, including the
    no-entity-matched-anything case where every column scores 0, resolve to
    the leftmost columns.
    """
    if scored.table_id != table.id:
        raise ValueError(
            f"scores are for table {scored.table_id!r}, not {table.id!r}"
        )
    column_best = [0.0] * table.n_columns
    for match in scored.per_entity_best:
        if match is not None and match.score > column_best[match.column]:
            column_best[match.column] = match.score
    ranked = sorted(range(table.n_columns), key=lambda c: (-column_best[c], c))
    return sorted(ranked[:COLUMN_KEEP_LIMIT])


def linearize(
    claim: Claim,
    table: Table,
    kept: list[int] | tuple[int, ...],
    max_rows: int | None = None,
) -> Linearisation:
    """Render a claim-prefixed table linearisation over the kept columns.

    Row r (1-based) becomes "row r is : h1 is c1 ; h2 is c2 ; ... ." with
    rows joined by single spaces. ``max_rows`` optionally caps how many rows
    are rendered (default unlimited), guarding encoder input size.
    """
    kept = tuple(kept)
    if not kept:
        raise ValueError("kept column list must not be empty")
    if len(set(kept)) != len(kept):
        raise ValueError("kept columns contain duplicates")
    if len(kept) > COLUMN_KEEP_LIMIT:
        raise ValueError(f"at most {COLUMN_KEEP_LIMIT} columns may be kept")
    if any(c < 0 or c >= table.n_columns for c in kept):
        raise ValueError(f"kept columns {kept} out of range for table {table.id!r}")

    rows = table.rows if max_rows is None else table.rows[:max_rows]
    segments = []
    for r, row in enumerate(rows, start=1):
        pairs = " ; ".join(f"{table.headers[c]} is {row[c]}" for c in kept)
        segments.append(f"row {r} is : {pairs} .")
    text = claim.text + SEPARATOR + " ".join(segments)
    return Linearisation(text=text, kept_columns=kept, source_table_id=table.id)
