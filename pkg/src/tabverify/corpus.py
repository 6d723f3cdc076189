"""Data model and JSON Lines ingestion for tables, claims, and splits.

Tables and claims are stored as JSON Lines, one record per line, UTF-8.
Cell text is kept verbatim at ingestion; any normalization (lowercasing,
whitespace collapse) is the retriever's job, so a loaded corpus stays a
faithful source of truth for linearisation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator


class ParseError(ValueError):
    """A line of an input file is not valid JSON or not a JSON object."""


class ValidationError(ValueError):
    """A record violates a structural invariant (ragged rows, bad spans, ...)."""


@dataclass(frozen=True)
class EntitySpan:
    """A named-entity mention inside a claim, as character offsets.

    ``surface`` must equal ``claim.text[start:end]`` and be non-empty after
    whitespace trimming. Spans may overlap each other.
    """

    start: int
    end: int
    surface: str

    def __post_init__(self) -> None:
        if self.start < 0 or self.end <= self.start:
            raise ValidationError(
                f"entity span [{self.start}, {self.end}) is not a valid range"
            )
        if not self.surface.strip():
            raise ValidationError("entity surface is empty after trimming")


@dataclass(frozen=True)
class Claim:
    """A natural-language statement to verify against a table collection.

    ``gold_table_id`` and ``label`` are optional: a claim is usable for
    training/evaluation iff its label is present. The gold table id may
    reference a table outside the loaded corpus (see ``dangling_gold_ids``).
    """

    id: str
    text: str
    entities: tuple[EntitySpan, ...] = ()
    gold_table_id: str | None = None
    label: bool | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "entities", tuple(self.entities))
        for span in self.entities:
            if span.end > len(self.text):
                raise ValidationError(
                    f"claim {self.id!r}: span [{span.start}, {span.end}) exceeds "
                    f"text of length {len(self.text)}"
                )
            actual = self.text[span.start : span.end]
            if actual != span.surface:
                raise ValidationError(
                    f"claim {self.id!r}: surface {span.surface!r} does not match "
                    f"text slice {actual!r} at [{span.start}, {span.end})"
                )

    @property
    def entity_surfaces(self) -> tuple[str, ...]:
        return tuple(span.surface for span in self.entities)


@dataclass(frozen=True)
class Table:
    """One table: an id, column headers, and a grid of cell strings.

    Every row must have exactly ``len(headers)`` cells, and the table must
    have at least one column and one row.
    """

    id: str
    headers: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "headers", tuple(self.headers))
        object.__setattr__(self, "rows", tuple(tuple(row) for row in self.rows))
        if not self.headers:
            raise ValidationError(f"table {self.id!r} has no columns")
        if not self.rows:
            raise ValidationError(f"table {self.id!r} has no rows")
        width = len(self.headers)
        for r, row in enumerate(self.rows):
            if len(row) != width:
                raise ValidationError(
                    f"table {self.id!r}: row {r} has {len(row)} cells, "
                    f"expected {width}"
                )

    @property
    def n_columns(self) -> int:
        return len(self.headers)

    @property
    def n_rows(self) -> int:
        return len(self.rows)


class Corpus:
    """An id-indexed, immutable collection of tables.

    Iteration yields tables in insertion order; lookups are by table id.
    A built Corpus is never mutated and can be shared freely across threads.
    """

    def __init__(self, tables: Iterable[Table] = ()) -> None:
        self._tables: dict[str, Table] = {}
        for table in tables:
            self.__class__._insert(self._tables, table)

    @staticmethod
    def _insert(index: dict[str, Table], table: Table) -> None:
        if table.id in index:
            raise ValidationError(f"duplicate table id {table.id!r}")
        index[table.id] = table

    def __len__(self) -> int:
        return len(self._tables)

    def __contains__(self, table_id: str) -> bool:
        return table_id in self._tables

    def __getitem__(self, table_id: str) -> Table:
        return self._tables[table_id]

    def __iter__(self) -> Iterator[Table]:
        return iter(self._tables.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self._tables == other._tables

    def ids(self) -> list[str]:
        return list(self._tables.keys())


def _record(line: str, lineno: int) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: expected a JSON object")
    return obj


def _string_field(obj: dict, name: str, lineno: int) -> str:
    value = obj.get(name)
    if not isinstance(value, str):
        raise ValidationError(f"line {lineno}: field {name!r} must be a string")
    return value


def load_tables(path: str) -> Corpus:
    """Load a table corpus from a JSON Lines file.

    Each line is an object with ``id`` (string), ``headers`` (array of
    strings) and ``rows`` (array of arrays of strings). Blank lines are
    skipped. Errors carry the offending line number or table id.
    """
    tables: dict[str, Table] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            obj = _record(line, lineno)
            table_id = _string_field(obj, "id", lineno)
            headers = obj.get("headers")
            rows = obj.get("rows")
            if not isinstance(headers, list) or not all(
                isinstance(h, str) for h in headers
            ):
                raise ValidationError(
                    f"line {lineno}: table {table_id!r}: 'headers' must be "
                    "an array of strings"
                )
            if not isinstance(rows, list) or not all(
                isinstance(row, list) and all(isinstance(c, str) for c in row)
                for row in rows
            ):
                raise ValidationError(
                    f"line {lineno}: table {table_id!r}: 'rows' must be "
                    "an array of arrays of strings"
                )
            table = Table(id=table_id, headers=tuple(headers), rows=tuple(rows))
            Corpus._insert(tables, table)
    corpus = Corpus()
    corpus._tables = tables
    return corpus


def load_claims(path: str) -> list[Claim]:
    """Load claims from a JSON Lines file.

    Each line is an object with ``id``, ``text``, ``entities`` (array of
    ``{start, end, surface}``), ``gold_table_id`` (string or null) and
    ``label`` (bool or null). Entity surfaces are checked against offsets.
    """
    claims: list[Claim] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            obj = _record(line, lineno)
            claim_id = _string_field(obj, "id", lineno)
            text = _string_field(obj, "text", lineno)
            raw_entities = obj.get("entities", [])
            if not isinstance(raw_entities, list):
                raise ValidationError(
                    f"line {lineno}: claim {claim_id!r}: 'entities' must be an array"
                )
            spans = []
            for ent in raw_entities:
                if (
                    not isinstance(ent, dict)
                    or not isinstance(ent.get("start"), int)
                    or not isinstance(ent.get("end"), int)
                    or not isinstance(ent.get("surface"), str)
                ):
                    raise ValidationError(
                        f"line {lineno}: claim {claim_id!r}: entity must be "
                        "{start: int, end: int, surface: string}"
                    )
                spans.append(
                    EntitySpan(start=ent["start"], end=ent["end"], surface=ent["surface"])
                )
            gold = obj.get("gold_table_id")
            if gold is not None and not isinstance(gold, str):
                raise ValidationError(
                    f"line {lineno}: claim {claim_id!r}: 'gold_table_id' must be "
                    "a string or null"
                )
            label = obj.get("label")
            if label is not None and not isinstance(label, bool):
                raise ValidationError(
                    f"line {lineno}: claim {claim_id!r}: 'label' must be "
                    "true, false, or null"
                )
            try:
                claims.append(
                    Claim(
                        id=claim_id,
                        text=text,
                        entities=tuple(spans),
                        gold_table_id=gold,
                        label=label,
                    )
                )
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from exc
    return claims


def table_to_record(table: Table) -> dict:
    return {"id": table.id, "headers": list(table.headers), "rows": [list(r) for r in table.rows]}


def claim_to_record(claim: Claim) -> dict:
    return {
        "id": claim.id,
        "text": claim.text,
        "entities": [
            {"start": s.start, "end": s.end, "surface": s.surface}
            for s in claim.entities
        ],
        "gold_table_id": claim.gold_table_id,
        "label": claim.label,
    }


def save_tables(corpus: Corpus, path: str) -> None:
    """Write a corpus back out as JSON Lines; inverse of ``load_tables``."""
    with open(path, "w", encoding="utf-8") as handle:
        for table in corpus:
            handle.write(json.dumps(table_to_record(table), ensure_ascii=False) + "\n")


def save_claims(claims: Iterable[Claim], path: str) -> None:
    """Write claims as JSON Lines; inverse of ``load_claims``."""
    with open(path, "w", encoding="utf-8") as handle:
        for claim in claims:
            handle.write(json.dumps(claim_to_record(claim), ensure_ascii=False) + "\n")


def dangling_gold_ids(claims: Iterable[Claim], corpus: Corpus) -> list[str]:
    """Gold table ids referenced by claims but absent from the corpus.

    Dangling references are reported (for warnings), not raised: claims and
    corpora may legitimately be loaded independently, e.g. when pairing one
    claim set with a different, larger table collection.
    """
    seen: list[str] = []
    for claim in claims:
        gold = claim.gold_table_id
        if gold is not None and gold not in corpus and gold not in seen:
            seen.append(gold)
    return seen
