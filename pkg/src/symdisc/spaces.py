"""Structure of input/output spaces and the layout of the unknown vector.

A space is either a list of independent channels (a direct sum, each
channel carrying its own representation) or a matrix space built from two
tensor factors (a Kronecker sum of the factor representations).  Factor
ids are ``x0, x1, ...`` for the input and ``y0, y1, ...`` for the output,
numbered by channel or by tensor factor.

Constraints tie factors together so that they share one block of unknowns,
or remove the output factors entirely for invariance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .linalg import direct_sum, kron_sum

CHANNELS = "channels"
TENSOR = "tensor"

SHARED_IO = "shared_io"
SHARED_INPUT_CHANNELS = "shared_input_channels"
INVARIANT_OUTPUT = "invariant_output"
CONSTRAINTS = (SHARED_IO, SHARED_INPUT_CHANNELS, INVARIANT_OUTPUT)


class SpecError(ValueError):
    """Invalid or unsupported space description."""


class UnsupportedSpecError(SpecError):
    """A serialized space description uses a variant this version cannot read."""

    def __init__(self, variant, message: str | None = None):
        self.variant = variant
        super().__init__(message or f"unsupported spec: {variant!r}")


@dataclass(frozen=True)
class Structure:
    kind: str
    dims: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in (CHANNELS, TENSOR):
            raise UnsupportedSpecError(self.kind)
        if not self.dims or any(int(d) < 1 for d in self.dims):
            raise SpecError(f"dims must be positive, got {self.dims}")
        if self.kind == TENSOR and len(self.dims) != 2:
            raise SpecError("only matrix (order-2) tensor spaces are supported")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def size(self) -> int:
        if self.kind == CHANNELS:
            return sum(self.dims)
        return self.dims[0] * self.dims[1]

    @property
    def n_factors(self) -> int:
        return len(self.dims)

    def slices(self) -> list[slice]:
        """Coordinate ranges of each channel (channels kind only)."""
        out, start = [], 0
        for d in self.dims:
            out.append(slice(start, start + d))
            start += d
        return out

    def action(self, mats: list[np.ndarray]) -> np.ndarray:
        """Full representation matrix from per-factor matrices."""
        if self.kind == CHANNELS:
            return direct_sum(mats)
        return kron_sum(mats[0], mats[1])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "Structure":
        if not isinstance(d, dict) or "kind" not in d or "dims" not in d:
            raise UnsupportedSpecError(d, f"unsupported spec: malformed structure {d!r}")
        return cls(d["kind"], tuple(d["dims"]))


def Channels(*dims: int) -> Structure:
    return Structure(CHANNELS, tuple(dims))


def TensorFactors(n1: int, n2: int) -> Structure:
    return Structure(TENSOR, (n1, n2))


@dataclass(frozen=True)
class SpaceSpec:
    input: Structure
    output: Structure
    constraints: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        cons = frozenset(self.constraints)
        unknown = cons - set(CONSTRAINTS)
        if unknown:
            raise UnsupportedSpecError(sorted(unknown)[0])
        object.__setattr__(self, "constraints", cons)
        if SHARED_IO in cons and INVARIANT_OUTPUT in cons:
            raise SpecError("shared_io and invariant_output are mutually exclusive")
        if SHARED_IO in cons and self.input != self.output:
            raise SpecError("shared_io requires identical input and output structure")
        if SHARED_INPUT_CHANNELS in cons and len(set(self.input.dims)) != 1:
            raise SpecError("shared_input_channels requires equal input channel dims")

    @property
    def input_dim(self) -> int:
        return self.input.size

    @property
    def output_dim(self) -> int:
        return self.output.size

    def to_dict(self) -> dict:
        return {
            "input": self.input.to_dict(),
            "output": self.output.to_dict(),
            "constraints": sorted(self.constraints),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpaceSpec":
        if not isinstance(d, dict) or "input" not in d or "output" not in d:
            raise UnsupportedSpecError(d, f"unsupported spec: malformed space spec {d!r}")
        return cls(
            Structure.from_dict(d["input"]),
            Structure.from_dict(d["output"]),
            frozenset(d.get("constraints", ())),
        )


@dataclass(frozen=True)
class Slot:
    """One block of unknowns: a ``dim x dim`` matrix shared by ``members``."""

    name: str
    dim: int
    offset: int
    members: tuple[str, ...]

    @property
    def size(self) -> int:
        return self.dim * self.dim


@dataclass(frozen=True)
class UnknownLayout:
    spec: SpaceSpec
    slots: tuple[Slot, ...]

    @property
    def total_dim(self) -> int:
        return sum(s.size for s in self.slots)

    def factor_ids(self) -> list[str]:
        xs = [f"x{i}" for i in range(self.spec.input.n_factors)]
        ys = [f"y{i}" for i in range(self.spec.output.n_factors)]
        return xs + ys

    def factor_dim(self, fid: str) -> int:
        struct = self.spec.input if fid[0] == "x" else self.spec.output
        return struct.dims[int(fid[1:])]

    def slot_of(self, fid: str) -> Slot | None:
        for s in self.slots:
            if fid in s.members:
                return s
        return None

    def unpack(self, v) -> dict[str, np.ndarray]:
        """Per-factor matrices from a vector of unknowns.

        Tied factors receive copies of the shared block; factors without a
        slot (invariant outputs) come back as zero matrices.
        """
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != self.total_dim:
            raise ValueError(f"expected {self.total_dim} unknowns, got {v.size}")
        out = {}
        for fid in self.factor_ids():
            s = self.slot_of(fid)
            d = self.factor_dim(fid)
            if s is None:
                out[fid] = np.zeros((d, d))
            else:
                out[fid] = v[s.offset:s.offset + s.size].reshape(d, d).copy()
        return out

    def pack(self, mats: dict[str, np.ndarray], atol: float = 1e-12) -> np.ndarray:
        """Inverse of :meth:`unpack`; tied factors must agree."""
        v = np.zeros(self.total_dim)
        for s in self.slots:
            given = [np.asarray(mats[m], dtype=np.float64) for m in s.members if m in mats]
            if not given:
                raise KeyError(f"no matrix given for slot {s.name}")
            ref = given[0]
            for g in given[1:]:
                if np.max(np.abs(g - ref)) > atol:
                    raise ValueError(f"tied factors of slot {s.name} disagree")
            v[s.offset:s.offset + s.size] = ref.reshape(-1)
        return v

    def input_action(self, mats: dict[str, np.ndarray]) -> np.ndarray:
        st = self.spec.input
        return st.action([mats[f"x{i}"] for i in range(st.n_factors)])

    def output_action(self, mats: dict[str, np.ndarray]) -> np.ndarray:
        st = self.spec.output
        return st.action([mats[f"y{i}"] for i in range(st.n_factors)])

    def describe(self) -> list[dict]:
        return [
            {"slot": s.name, "dim": s.dim, "offset": s.offset, "members": list(s.members)}
            for s in self.slots
        ]


def _union_find(items: Iterable[str], pairs: Iterable[tuple[str, str]]) -> dict[str, str]:
    parent = {i: i for i in items}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra
    return {i: find(i) for i in parent}


def layout_unknowns(spec: SpaceSpec) -> UnknownLayout:
    """Assign every (possibly tied) factor a contiguous block of unknowns.

    Input factors come first in channel order, then output factors.
    """
    xs = [f"x{i}" for i in range(spec.input.n_factors)]
    ys = [] if INVARIANT_OUTPUT in spec.constraints else [
        f"y{i}" for i in range(spec.output.n_factors)
    ]
    pairs = []
    if SHARED_INPUT_CHANNELS in spec.constraints:
        pairs += [(xs[0], x) for x in xs[1:]]
    if SHARED_IO in spec.constraints:
        pairs += list(zip(xs, ys))
    root = _union_find(xs + ys, pairs)

    groups: dict[str, list[str]] = {}
    for fid in xs + ys:
        groups.setdefault(root[fid], []).append(fid)

    dims = {f"x{i}": d for i, d in enumerate(spec.input.dims)}
    dims.update({f"y{i}": d for i, d in enumerate(spec.output.dims)})
    slots, offset, seen = [], 0, set()
    for fid in xs + ys:
        r = root[fid]
        if r in seen:
            continue
        seen.add(r)
        members = tuple(groups[r])
        d = dims[members[0]]
        if any(dims[m] != d for m in members):
            raise SpecError(f"tied factors {members} have different dims")
        slots.append(Slot("=".join(members), d, offset, members))
        offset += d * d
    return UnknownLayout(spec, tuple(slots))
