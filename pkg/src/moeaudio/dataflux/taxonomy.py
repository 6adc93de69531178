"""A small L0-L3 category tree for paralinguistic, environment and music questions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class TaxonomyPath:
    levels: tuple[str, ...]

    @classmethod
    def parse(cls, value) -> "TaxonomyPath":
        parts = value if isinstance(value, (list, tuple)) else str(value).split(">")
        levels = tuple(p.strip() for p in parts if p.strip())
        if not 3 <= len(levels) <= 4:
            raise TaxonomyError(f"taxonomy path needs 3 or 4 levels, got {value!r}")
        return cls(levels)

    def __str__(self) -> str:
        return " > ".join(self.levels)

    def level(self, i: int) -> str:
        return self.levels[i] if i < len(self.levels) else ""

    def hierarchy_block(self) -> str:
        return "\n".join(f"- L{i}: {name}" for i, name in enumerate(self.levels))


class Taxonomy:
    def __init__(self, tree: dict):
        self.tree = tree

    @classmethod
    def bundled(cls) -> "Taxonomy":
        raw = resources.files("moeaudio.dataflux").joinpath("taxonomy.json").read_text(encoding="utf-8")
        return cls(json.loads(raw))

    @classmethod
    def from_file(cls, path) -> "Taxonomy":
        return cls(json.loads(Path(path).read_text()))

    def resolve(self, value) -> TaxonomyPath:
        path = value if isinstance(value, TaxonomyPath) else TaxonomyPath.parse(value)
        node = self.tree
        for depth, name in enumerate(path.levels):
            if isinstance(node, dict) and name in node:
                node = node[name]
            elif isinstance(node, list) and depth == 3 and name in node:
                node = None
            else:
                raise TaxonomyError(f"{path}: no category {name!r} at level L{depth}")
        return path

    def paths(self) -> list[TaxonomyPath]:
        out = []
        for l0, l1s in self.tree.items():
            for l1, l2s in l1s.items():
                for l2, l3s in l2s.items():
                    out.append(TaxonomyPath((l0, l1, l2)))
                    out.extend(TaxonomyPath((l0, l1, l2, l3)) for l3 in l3s)
        return out
