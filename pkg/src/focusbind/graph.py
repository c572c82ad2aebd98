"""Two-object scene graphs used by the evaluator and the benchmarks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple


@dataclass(frozen=True)
class EvalGraph:
    obj1: str
    obj2: str
    attrs1: Tuple[str, ...] = ()
    attrs2: Tuple[str, ...] = ()
    relation: Optional[str] = None

    def __post_init__(self):
        if not self.obj1 or not self.obj2:
            raise ValueError("object names must be non-empty")
        object.__setattr__(self, "attrs1", tuple(self.attrs1))
        object.__setattr__(self, "attrs2", tuple(self.attrs2))

    def swap_attributes(self) -> "EvalGraph":
        return EvalGraph(self.obj1, self.obj2, self.attrs2, self.attrs1, self.relation)

    def to_dict(self) -> dict:
        return {"obj1": self.obj1, "obj2": self.obj2, "attrs1": list(self.attrs1),
                "attrs2": list(self.attrs2), "relation": self.relation}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalGraph":
        return cls(d["obj1"], d["obj2"], tuple(d.get("attrs1", ())), tuple(d.get("attrs2", ())),
                   d.get("relation"))
