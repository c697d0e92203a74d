"""Content-addressed factor store with dependency-aware evaluation scheduling."""
from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from ._io import atomic_write_text
from .dsl import parse, required_fields, to_text
from .errors import (
    CorruptRecordError,
    CycleError,
    DataError,
    DslError,
    DuplicateFactorError,
    IntegrityError,
    UnresolvedDependencyError,
)
from .metrics import REPORT_FIELDS, FactorReport

ID_HEX = 32  # 128-bit content hash
STATUSES = ("active", "retired")


def factor_id(expr_text: str) -> str:
    return hashlib.sha256(expr_text.encode("utf-8")).hexdigest()[:ID_HEX]


@dataclass(frozen=True)
class FactorRecord:
    id: str
    name: str
    expr_text: str
    created_at: str
    metrics: Mapping[str, float] = field(default_factory=dict)
    depends_on_fields: tuple[str, ...] = ()
    depends_on_factors: tuple[str, ...] = ()
    status: str = "active"

    @property
    def depends_on(self) -> set[str]:
        return set(self.depends_on_fields) | set(self.depends_on_factors)

    def to_json(self) -> str:
        metrics = {k: _json_num(self.metrics[k]) for k in REPORT_FIELDS if k in self.metrics}
        obj = {
            "id": self.id,
            "name": self.name,
            "expr": self.expr_text,
            "created_at": self.created_at,
            "metrics": metrics,
            "depends_on": {"fields": sorted(self.depends_on_fields),
                           "factors": sorted(self.depends_on_factors)},
            "status": self.status,
        }
        return json.dumps(obj, ensure_ascii=False, allow_nan=False, separators=(", ", ": "))


def _json_num(v):
    if isinstance(v, int):
        return v
    v = float(v)
    return v if math.isfinite(v) else None


def make_record(expr: str, name: str | None = None, created_at: str = "",
                report: FactorReport | None = None, depends_on_factors: Iterable[str] = (),
                status: str = "active") -> FactorRecord:
    """Build a record from any accepted spelling of an expression (stored canonically)."""
    text = to_text(parse(expr))
    fid = factor_id(text)
    metrics = report.scalars() if report is not None else {}
    return FactorRecord(fid, name or fid[:12], text, created_at, metrics,
                        tuple(sorted(required_fields(parse(text)))),
                        tuple(sorted(set(depends_on_factors))), status)


class DependencyGraph:
    """Edges run from prerequisite to dependent."""

    def __init__(self):
        self.prereqs: dict[str, set[str]] = {}

    def add_node(self, node: str) -> None:
        self.prereqs.setdefault(node, set())

    def add_edge(self, prerequisite: str, dependent: str) -> None:
        self.add_node(prerequisite)
        self.add_node(dependent)
        self.prereqs[dependent].add(prerequisite)

    @property
    def nodes(self) -> set[str]:
        return set(self.prereqs)

    def edges(self) -> set[tuple[str, str]]:
        return {(p, d) for d, ps in self.prereqs.items() for p in ps}

    def closure(self, targets: Iterable[str]) -> set[str]:
        seen: set[str] = set()
        stack = list(targets)
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            if n not in self.prereqs:
                raise KeyError(n)
            seen.add(n)
            stack.extend(self.prereqs[n])
        return seen

    def reaches(self, start: str, goal: str) -> bool:
        """True if ``goal`` is a (transitive) prerequisite of ``start``."""
        seen, stack = set(), [start]
        while stack:
            n = stack.pop()
            if n == goal:
                return True
            if n in seen:
                continue
            seen.add(n)
            stack.extend(self.prereqs.get(n, ()))
        return False

    def find_cycle(self, within: set[str] | None = None) -> list[str] | None:
        nodes = sorted(self.prereqs if within is None else within)
        color: dict[str, int] = {}
        for root in nodes:
            if color.get(root):
                continue
            path: list[str] = []
            stack = [(root, iter(sorted(self.prereqs[root])))]
            color[root] = 1
            path.append(root)
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    color[node] = 2
                    stack.pop()
                    path.pop()
                    continue
                if within is not None and nxt not in within:
                    continue
                c = color.get(nxt, 0)
                if c == 1:
                    cyc = list(reversed(path[path.index(nxt):]))
                    k = cyc.index(min(cyc))
                    return cyc[k:] + cyc[:k]
                if c == 0:
                    color[nxt] = 1
                    path.append(nxt)
                    stack.append((nxt, iter(sorted(self.prereqs[nxt]))))
        return None


def schedule_graph(graph: DependencyGraph, targets: Iterable[str]) -> list[str]:
    """Targets plus all transitive prerequisites, prerequisites first; ready ties by name."""
    need = graph.closure(targets)
    indeg = {n: len(graph.prereqs[n] & need) for n in need}
    dependents: dict[str, list[str]] = {n: [] for n in need}
    for n in need:
        for p in graph.prereqs[n]:
            if p in need:
                dependents[p].append(n)
    ready = [n for n, k in indeg.items() if k == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for d in dependents[n]:
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(ready, d)
    if len(order) != len(need):
        raise CycleError(graph.find_cycle(need - set(order)) or sorted(need - set(order)))
    return order


class FactorBase:
    """In-memory factor base. ``fields`` declares the admissible meta fields (None = any)."""

    def __init__(self, fields: Iterable[str] | None = None):
        self.fields = None if fields is None else set(fields)
        self.records: dict[str, FactorRecord] = {}

    def __len__(self):
        return len(self.records)

    def __contains__(self, fid):
        return fid in self.records

    def __getitem__(self, fid) -> FactorRecord:
        return self.records[fid]

    def active(self) -> list[FactorRecord]:
        return [r for r in self.records.values() if r.status == "active"]

    def _check_record(self, rec: FactorRecord) -> None:
        try:
            canonical = to_text(parse(rec.expr_text))
        except DslError as e:
            raise DataError(f"expression does not parse: {e}") from e
        if canonical != rec.expr_text:
            raise IntegrityError(f"expression is not in canonical form: {rec.expr_text!r}")
        if factor_id(rec.expr_text) != rec.id:
            raise IntegrityError(f"id {rec.id} does not match the hash of {rec.expr_text!r}")
        if rec.status not in STATUSES:
            raise DataError(f"unknown status {rec.status!r}")

    def commit(self, rec: FactorRecord) -> str:
        self._check_record(rec)
        if rec.id in self.records:
            raise DuplicateFactorError(f"factor {rec.id} ({rec.expr_text}) already committed")
        if self.fields is not None:
            unknown = set(rec.depends_on_fields) - self.fields
            if unknown:
                raise UnresolvedDependencyError(f"undeclared field(s): {sorted(unknown)}")
        if rec.id in rec.depends_on_factors:
            raise CycleError([rec.id, rec.id])
        missing = [d for d in rec.depends_on_factors if d not in self.records]
        if missing:
            raise UnresolvedDependencyError(f"unknown prerequisite factor(s): {missing}")
        g = self.graph()
        for d in rec.depends_on_factors:
            if g.reaches(d, rec.id):
                raise CycleError([rec.id, d, rec.id])
        self.records[rec.id] = rec
        return rec.id

    def retire(self, fid: str) -> None:
        self.records[fid] = replace(self.records[fid], status="retired")

    def graph(self, include_fields: bool = True) -> DependencyGraph:
        g = DependencyGraph()
        for rec in self.records.values():
            g.add_node(rec.id)
            for d in rec.depends_on_factors:
                g.add_edge(d, rec.id)
            if include_fields:
                for f in rec.depends_on_fields:
                    g.add_edge(f, rec.id)
        return g

    def schedule(self, targets: Iterable[str], include_fields: bool = False) -> list[str]:
        targets = list(targets)
        unknown = [t for t in targets if t not in self.records]
        if unknown:
            raise KeyError(f"unknown target(s): {unknown}")
        return schedule_graph(self.graph(include_fields), targets)

    def dumps(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records.values())

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    def append(self, rec: FactorRecord, path) -> str:
        """Commit and append one line to ``path`` (the file is never truncated)."""
        fid = self.commit(rec)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as fh:
            fh.write(rec.to_json() + "\n")
        return fid

    @classmethod
    def loads(cls, text: str, fields: Iterable[str] | None = None) -> "FactorBase":
        recs: list[tuple[int, FactorRecord]] = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            recs.append((lineno, _parse_line(line, lineno)))
        base = cls(fields)
        seen: dict[str, int] = {}
        for lineno, rec in recs:
            try:
                base._check_record(rec)
            except (IntegrityError, DataError) as e:
                raise type(e)(f"line {lineno}: {e}") from None
            if rec.id in seen:
                raise DuplicateFactorError(f"line {lineno}: duplicate id {rec.id} (first on line {seen[rec.id]})")
            seen[rec.id] = lineno
            base.records[rec.id] = rec
        for lineno, rec in recs:
            missing = [d for d in rec.depends_on_factors if d not in base.records]
            if missing:
                raise UnresolvedDependencyError(f"line {lineno}: unknown prerequisite(s) {missing}")
            if base.fields is not None and set(rec.depends_on_fields) - base.fields:
                raise UnresolvedDependencyError(f"line {lineno}: undeclared field(s)")
        cyc = base.graph(include_fields=False).find_cycle()
        if cyc:
            raise CycleError(cyc)
        return base

    @classmethod
    def load(cls, path, fields: Iterable[str] | None = None) -> "FactorBase":
        path = Path(path)
        if not path.exists():
            return cls(fields)
        return cls.loads(path.read_text(encoding="utf-8"), fields)


def _parse_line(line: str, lineno: int) -> FactorRecord:
    try:
        obj = json.loads(line)
        deps = obj["depends_on"]
        metrics = {k: (float("nan") if v is None else v) for k, v in obj["metrics"].items()}
        rec = FactorRecord(
            id=str(obj["id"]), name=str(obj["name"]), expr_text=str(obj["expr"]),
            created_at=str(obj["created_at"]), metrics=metrics,
            depends_on_fields=tuple(sorted(deps["fields"])),
            depends_on_factors=tuple(sorted(deps["factors"])),
            status=str(obj["status"]),
        )
    except (ValueError, KeyError, TypeError, AttributeError) as e:
        raise CorruptRecordError(f"unreadable factor record ({e})", lineno) from None
    return rec
