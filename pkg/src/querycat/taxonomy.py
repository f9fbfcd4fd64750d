"""Category taxonomy: loading, validation, and the level/parent indexes
used by scoring, inference, and evaluation.

A taxonomy is a forest of rooted trees (every depth-1 node is a root).
Category paths run root-to-terminus and may stop at an internal node.
Paths render as ``"//"``-joined segment names, e.g.
``Electronics//Cell Phones//Accessories//Cases``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

MAX_DEPTH = 6
PATH_SEPARATOR = "//"


class TaxonomyError(ValueError):
    """Invalid taxonomy input: structural defects or unresolvable paths."""


@dataclass(frozen=True)
class TaxonomyNode:
    """One category node. ``parent_id`` is None for depth-1 (root) nodes."""

    node_id: int
    parent_id: int | None
    name: str
    depth: int


@dataclass(frozen=True)
class CategoryPath:
    """Root-to-terminus sequence of node ids, consecutive parent/child."""

    node_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.node_ids:
            raise TaxonomyError("category path must contain at least one node")

    @property
    def depth(self) -> int:
        return len(self.node_ids)

    @property
    def terminal(self) -> int:
        return self.node_ids[-1]

    def __len__(self) -> int:
        return len(self.node_ids)


class Taxonomy:
    """Immutable category tree with level and adjacency indexes.

    Sibling lists and per-level lists are ordered by ascending node id so
    that downstream softmax/beam tie-breaking is deterministic.  Depths are
    1-based: depth 1 is the root level.
    """

    def __init__(
        self,
        entries: Iterable[tuple[int, int | None, str]],
        source_lines: dict[int, int] | None = None,
    ) -> None:
        lines = source_lines or {}

        def where(node_id: int) -> str:
            return f" (line {lines[node_id]})" if node_id in lines else ""

        raw: dict[int, tuple[int | None, str]] = {}
        for node_id, parent_id, name in entries:
            if not isinstance(node_id, int) or node_id <= 0:
                raise TaxonomyError(f"node id must be a positive integer, got {node_id!r}")
            if node_id in raw:
                raise TaxonomyError(f"duplicate node id {node_id}{where(node_id)}")
            if not name:
                raise TaxonomyError(f"empty name for node {node_id}{where(node_id)}")
            if PATH_SEPARATOR in name:
                raise TaxonomyError(
                    f"name {name!r} of node {node_id} contains {PATH_SEPARATOR!r}{where(node_id)}"
                )
            raw[node_id] = (parent_id, name)
        if not raw:
            raise TaxonomyError("taxonomy is empty")

        # Resolve depths, detecting orphans and cycles on the way up.
        depths: dict[int, int] = {}
        for start in raw:
            if start in depths:
                continue
            chain = []
            node: int | None = start
            while node is not None and node not in depths:
                if node not in raw:
                    child = chain[-1]
                    raise TaxonomyError(
                        f"node {child} references missing parent {node}{where(child)}"
                    )
                if node in chain:
                    cycle = chain[chain.index(node):] + [node]
                    ids = " -> ".join(str(n) for n in cycle)
                    raise TaxonomyError(f"cycle detected among nodes {ids}{where(node)}")
                chain.append(node)
                node = raw[node][0]
            base = 0 if node is None else depths[node]
            for offset, nid in enumerate(reversed(chain), start=1):
                depths[nid] = base + offset
                if depths[nid] > MAX_DEPTH:
                    raise TaxonomyError(
                        f"node {nid} has depth {depths[nid]} > {MAX_DEPTH}{where(nid)}"
                    )

        self.nodes: dict[int, TaxonomyNode] = {
            nid: TaxonomyNode(nid, parent, name, depths[nid])
            for nid, (parent, name) in raw.items()
        }

        children: dict[int, list[int]] = {nid: [] for nid in raw}
        roots: list[int] = []
        for nid, node in self.nodes.items():
            if node.parent_id is None:
                roots.append(nid)
            else:
                children[node.parent_id].append(nid)
        self.children: dict[int, tuple[int, ...]] = {
            nid: tuple(sorted(kids)) for nid, kids in children.items()
        }
        self.roots: tuple[int, ...] = tuple(sorted(roots))

        # Sibling names must be unique or path parsing would be ambiguous.
        for parent, kids in [(None, self.roots)] + [
            (nid, kids) for nid, kids in self.children.items() if kids
        ]:
            seen: dict[str, int] = {}
            for kid in kids:
                name = self.nodes[kid].name
                if name in seen:
                    scope = f"under node {parent}" if parent is not None else "at root level"
                    raise TaxonomyError(
                        f"duplicate sibling name {name!r} {scope}: "
                        f"nodes {seen[name]} and {kid}{where(kid)}"
                    )
                seen[name] = kid

        self.max_depth: int = max(depths.values())
        levels: dict[int, list[int]] = {d: [] for d in range(1, self.max_depth + 1)}
        for nid, depth in depths.items():
            levels[depth].append(nid)
        self.levels: dict[int, tuple[int, ...]] = {
            d: tuple(sorted(ids)) for d, ids in levels.items()
        }

        self._child_by_name: dict[int | None, dict[str, int]] = {None: {}}
        for nid in self.roots:
            self._child_by_name[None][self.nodes[nid].name] = nid
        for parent, kids in self.children.items():
            self._child_by_name[parent] = {self.nodes[k].name: k for k in kids}

        # Dense traversal structures for vectorized inference: nodes in
        # depth-major order (ascending node id within a level).
        order: list[int] = []
        self.level_slices: dict[int, slice] = {}
        for d in range(1, self.max_depth + 1):
            start = len(order)
            order.extend(self.levels[d])
            self.level_slices[d] = slice(start, len(order))
        self.node_order: np.ndarray = np.asarray(order, dtype=np.int64)
        self.position_of: dict[int, int] = {nid: i for i, nid in enumerate(order)}
        self.parent_position: np.ndarray = np.asarray(
            [
                -1 if self.nodes[nid].parent_id is None else self.position_of[self.nodes[nid].parent_id]
                for nid in order
            ],
            dtype=np.int64,
        )
        self.fingerprint: str = self._fingerprint()

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[int]:
        return iter(self.node_order.tolist())

    def _fingerprint(self) -> str:
        h = hashlib.sha256()
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            parent = "" if node.parent_id is None else str(node.parent_id)
            h.update(f"{nid}\t{parent}\t{node.name}\n".encode("utf-8"))
        return h.hexdigest()

    def path_to(self, node_id: int) -> CategoryPath:
        """Root-to-node path for ``node_id``."""
        if node_id not in self.nodes:
            raise TaxonomyError(f"unknown node id {node_id}")
        ids = []
        cursor: int | None = node_id
        while cursor is not None:
            ids.append(cursor)
            cursor = self.nodes[cursor].parent_id
        return CategoryPath(tuple(reversed(ids)))


def load_taxonomy(source: str | Path | Iterable[str]) -> Taxonomy:
    """Load a taxonomy from TSV: ``node_id<TAB>parent_id<TAB>name`` per line.

    An empty ``parent_id`` marks a root-level node.  Lines starting with
    ``#`` and blank lines are skipped.  Accepts a path or an iterable of
    lines.  Raises :class:`TaxonomyError` with the offending line number on
    any structural defect.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            lines = fh.readlines()
    else:
        lines = list(source)

    entries: list[tuple[int, int | None, str]] = []
    source_lines: dict[int, int] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.rstrip("\n").rstrip("\r")
        if not stripped.strip() or stripped.lstrip().startswith("#"):
            continue
        parts = stripped.split("\t")
        if len(parts) != 3:
            raise TaxonomyError(
                f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}"
            )
        id_text, parent_text, name = parts
        try:
            node_id = int(id_text)
        except ValueError:
            raise TaxonomyError(f"line {lineno}: bad node id {id_text!r}") from None
        parent_id: int | None
        if parent_text.strip() == "":
            parent_id = None
        else:
            try:
                parent_id = int(parent_text)
            except ValueError:
                raise TaxonomyError(f"line {lineno}: bad parent id {parent_text!r}") from None
        name = name.strip()
        if not name:
            raise TaxonomyError(f"line {lineno}: empty name for node {node_id}")
        entries.append((node_id, parent_id, name))
        if node_id not in source_lines:
            source_lines[node_id] = lineno
    return Taxonomy(entries, source_lines=source_lines)


def render_path(taxonomy: Taxonomy, path: CategoryPath) -> str:
    """Render a path as ``"//"``-joined segment names."""
    return PATH_SEPARATOR.join(taxonomy.nodes[nid].name for nid in path.node_ids)


def parse_path(taxonomy: Taxonomy, text: str) -> CategoryPath:
    """Resolve ``"A//B//C"`` segment-by-segment into a :class:`CategoryPath`.

    Each segment is matched by name under the previously resolved node.
    Raises :class:`TaxonomyError` naming the resolved prefix on the first
    unknown segment.
    """
    segments = text.split(PATH_SEPARATOR)
    if not segments or any(not s for s in segments):
        raise TaxonomyError(f"malformed path text {text!r}")
    ids: list[int] = []
    cursor: int | None = None
    for segment in segments:
        match = taxonomy._child_by_name.get(cursor, {}).get(segment)
        if match is None:
            prefix = PATH_SEPARATOR.join(
                taxonomy.nodes[n].name for n in ids
            )
            raise TaxonomyError(
                f"unknown segment {segment!r} after prefix {prefix!r}"
                if prefix
                else f"unknown root-level segment {segment!r}"
            )
        ids.append(match)
        cursor = match
    return CategoryPath(tuple(ids))


def truncate_path(path: CategoryPath, depth: int) -> CategoryPath | None:
    """First ``depth`` nodes of the path, or None if the path is shallower."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if len(path) < depth:
        return None
    if len(path) == depth:
        return path
    return CategoryPath(path.node_ids[:depth])
