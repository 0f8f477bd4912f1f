"""Line-delimited parse corpora: {"id", "utterance", "parse"} per line."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from . import trees
from .trees import ParseDialect, ParseTree


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    id: str
    utterance: str
    parse: str


class Corpus:
    """Ordered record collection with cached parse trees."""

    def __init__(self, records: list[Record], dialect: ParseDialect):
        self.records = list(records)
        self.dialect = ParseDialect(dialect)
        self.index_of: dict[str, int] = {}
        for i, rec in enumerate(self.records):
            if rec.id in self.index_of:
                raise CorpusFormatError(f"duplicate record id {rec.id!r}")
            self.index_of[rec.id] = i
        self._tree_cache: dict[tuple[str, bool], ParseTree] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self.index_of

    def get(self, record_id: str) -> Record:
        return self.records[self.index_of[record_id]]

    def ids(self) -> list[str]:
        return [rec.id for rec in self.records]

    def tree(self, record_id: str, anonymize: bool = False) -> ParseTree:
        key = (record_id, anonymize)
        cached = self._tree_cache.get(key)
        if cached is None:
            rec = self.get(record_id)
            cached = trees.parse(rec.parse, self.dialect)
            if anonymize:
                cached = trees.anonymize_leaves(cached)
            self._tree_cache[key] = cached
        return cached


def load_corpus(path: str | Path, dialect: ParseDialect | str) -> Corpus:
    """Read one JSON object per line; errors name the offending line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(obj, dict) or not {"id", "utterance", "parse"} <= obj.keys():
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected object with id/utterance/parse fields")
            records.append(Record(str(obj["id"]), str(obj["utterance"]), str(obj["parse"])))
    return Corpus(records, ParseDialect(dialect))


def save_corpus(records: list[Record], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(
                {"id": rec.id, "utterance": rec.utterance, "parse": rec.parse},
                sort_keys=True) + "\n")
