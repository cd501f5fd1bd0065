"""The global event record of a simulation run, and its NDJSON form.

Rows are plain tuples ``(kind, field1, field2, ...)``; a row's position in the
trace is its event index. ``FIELDS`` fixes the field names and their order in the
serialized form.
"""
from __future__ import annotations

import json
from typing import Iterable, Iterator

from .errors import TraceFormatError

FIELDS = {
    "start": ("config",),
    "send": ("node", "seq", "msg", "step", "vt", "ref", "extra"),
    "deliver": ("from", "to", "seq", "msg", "step", "t", "net"),
    "hold": ("from", "to", "seq", "t"),
    "advance": ("node", "from_step", "to_step", "via"),
    "cert": ("node", "step", "of", "ackers"),
    "propose": ("node", "round", "commitment"),
    "round_end": ("node", "round", "best", "ticket", "committed"),
    "commit": ("node", "round", "proposal", "block"),
    "finalize": ("node", "height", "blocks"),
    "delay_set": ("members", "t"),
    "end": ("reason", "t", "pending", "delay_set", "steps"),
}


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


class Trace:
    """Ordered event rows. Mutable while a run appends to it, frozen afterwards."""

    def __init__(self, rows: Iterable[tuple] = ()):
        self.rows = list(rows)
        # bound list method: appends are the hottest call in a recorded run
        self.append = self.rows.append

    def append(self, row: tuple) -> None:
        self.rows.append(row)

    def freeze(self) -> "Trace":
        if isinstance(self.rows, list):
            self.rows = tuple(self.rows)
            del self.append
        return self

    def __len__(self):
        return len(self.rows)

    def __iter__(self) -> Iterator[tuple]:
        return iter(self.rows)

    def of_kind(self, kind: str) -> list[tuple[int, tuple]]:
        return [(e, r) for e, r in enumerate(self.rows) if r[0] == kind]

    @property
    def config(self) -> dict:
        if self.rows and self.rows[0][0] == "start":
            return self.rows[0][1]
        return {}

    @property
    def end(self) -> tuple | None:
        if self.rows and self.rows[-1][0] == "end":
            return self.rows[-1]
        return None

    @property
    def truncated(self) -> bool:
        end = self.end
        return end is None or end[1] == "truncated"

    def to_ndjson(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def lines(self) -> Iterator[str]:
        for e, row in enumerate(self.rows):
            names = FIELDS.get(row[0])
            if names is None or len(names) != len(row) - 1:
                raise TraceFormatError(f"event {e}: malformed {row[0]!r} row")
            obj = {"e": e, "kind": row[0]}
            obj.update(zip(names, row[1:]))
            yield json.dumps(obj, separators=(",", ":"))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line)
                fh.write("\n")

    @classmethod
    def from_ndjson(cls, text: str | Iterable[str]) -> "Trace":
        lines = text.splitlines() if isinstance(text, str) else text
        rows = []
        for lineno, line in enumerate(lines):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {lineno + 1}: {exc}") from None
            kind = obj.get("kind")
            names = FIELDS.get(kind)
            if names is None:
                raise TraceFormatError(f"line {lineno + 1}: unknown event kind {kind!r}")
            if obj.get("e") != len(rows):
                raise TraceFormatError(f"line {lineno + 1}: event index {obj.get('e')} out of order")
            try:
                vals = [obj[k] for k in names]
            except KeyError as exc:
                raise TraceFormatError(f"line {lineno + 1}: missing field {exc}") from None
            if kind != "start":
                vals = [_tuplify(v) for v in vals]
            rows.append((kind, *vals))
        return cls(rows).freeze()

    @classmethod
    def load(cls, path) -> "Trace":
        with open(path) as fh:
            return cls.from_ndjson(fh)
