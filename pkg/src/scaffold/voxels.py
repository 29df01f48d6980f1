"""Block placement logs, voxel grids and the token sequences the denoiser sees.

A structure lives in three forms here:

* a list of :class:`BlockPlacement` records replayed in timestamp order,
* a sparse :class:`VoxelGrid` (occupied cells only, block ids as values),
* a fixed-length :class:`TokenSequence` of ``L`` slots, the first ``k`` of
  which carry the occupied voxels and the rest ``PAD``.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Coord = tuple[int, int, int]

AIR = 0
MAX_BLOCK_ID = 255
# sentinel coordinate carried by PAD slots; never a grid cell
PAD_POSITION = -1

_SCFD_MAGIC = b"SCFD"


class VoxelDataError(ValueError):
    pass


class PlacementParseError(VoxelDataError):
    """Raised when a placement log contains malformed records.

    ``errors`` holds ``(line_number, message)`` pairs for every rejected line.
    """

    def __init__(self, errors: list[tuple[int, str]], total: int):
        self.errors = errors
        self.total = total
        head = "; ".join(f"line {n}: {msg}" for n, msg in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"{len(errors)} of {total} records rejected: {head}{more}")


class StructureTooLarge(VoxelDataError):
    def __init__(self, axis: str, extent: int, dim: int):
        self.axis = axis
        self.extent = extent
        self.dim = dim
        super().__init__(f"extent {extent} along {axis} exceeds cube side {dim}")


class SequenceOverflow(VoxelDataError):
    pass


class IncompleteSample(VoxelDataError):
    pass


class DuplicatePosition(VoxelDataError):
    pass


@dataclass(frozen=True)
class BlockPlacement:
    house_id: str
    x: int
    y: int
    z: int
    block_id: int
    t: int


@dataclass(frozen=True)
class VoxelGrid:
    """Occupied cells of a ``dim``-sided cube, mapped to original block ids.

    Insertion order of ``cells`` is the order in which voxels were last
    written; equality ignores it.
    """

    dim: int
    cells: Mapping[Coord, int] = field(default_factory=dict)

    def __post_init__(self):
        for (x, y, z), block in self.cells.items():
            if not (0 <= x < self.dim and 0 <= y < self.dim and 0 <= z < self.dim):
                raise VoxelDataError(f"cell {(x, y, z)} outside cube of side {self.dim}")
            if not (0 < block <= MAX_BLOCK_ID):
                raise VoxelDataError(f"cell {(x, y, z)} holds invalid block id {block}")

    @property
    def k(self) -> int:
        return len(self.cells)

    def extent(self) -> Coord:
        if not self.cells:
            return (0, 0, 0)
        pts = np.array(list(self.cells), dtype=np.int64)
        span = pts.max(axis=0) - pts.min(axis=0) + 1
        return tuple(int(v) for v in span)

    def occupancy(self) -> "OccupancyMap":
        return OccupancyMap(self.dim, frozenset(self.cells))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim,) * 3, dtype=np.int64)
        for (x, y, z), block in self.cells.items():
            out[x, y, z] = block
        return out

    @classmethod
    def from_dense(cls, array: np.ndarray) -> "VoxelGrid":
        array = np.asarray(array)
        if array.ndim != 3 or len(set(array.shape)) != 1:
            raise VoxelDataError(f"expected a cube, got shape {array.shape}")
        idx = np.argwhere(array != AIR)
        cells = {tuple(int(c) for c in p): int(array[tuple(p)]) for p in idx}
        return cls(array.shape[0], cells)


@dataclass(frozen=True)
class OccupancyMap:
    dim: int
    occupied: frozenset[Coord]

    @property
    def k(self) -> int:
        return len(self.occupied)

    def ordered(self) -> list[Coord]:
        return sorted(self.occupied)


class Vocabulary:
    """Dense token ids for the block ids observed in a dataset.

    Block tokens occupy ``[0, size)``; ``MASK``, ``PAD`` and ``BOS`` follow in
    that order, so ``total == size + 3``.
    """

    def __init__(self, block_ids: Iterable[int]):
        ids = sorted(set(int(b) for b in block_ids))
        for b in ids:
            if not (0 < b <= MAX_BLOCK_ID):
                raise VoxelDataError(f"block id {b} cannot be a vocabulary entry")
        self.token_to_block = ids
        self.block_to_token = {b: i for i, b in enumerate(ids)}

    @classmethod
    def from_grids(cls, grids: Iterable[VoxelGrid]) -> "Vocabulary":
        ids: set[int] = set()
        for g in grids:
            ids.update(g.cells.values())
        return cls(ids)

    @property
    def size(self) -> int:
        return len(self.token_to_block)

    @property
    def mask(self) -> int:
        return self.size

    @property
    def pad(self) -> int:
        return self.size + 1

    @property
    def bos(self) -> int:
        return self.size + 2

    @property
    def total(self) -> int:
        return self.size + 3

    def is_special(self, token: int) -> bool:
        return token >= self.size

    def encode(self, block_id: int) -> int:
        try:
            return self.block_to_token[block_id]
        except KeyError:
            raise VoxelDataError(f"block id {block_id} not in vocabulary") from None

    def decode(self, token: int) -> int:
        if not (0 <= token < self.size):
            raise VoxelDataError(f"token {token} is not a block token")
        return self.token_to_block[token]

    def to_json(self) -> str:
        return json.dumps({"block_ids": self.token_to_block})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text)["block_ids"])

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.token_to_block == other.token_to_block

    def __repr__(self):
        return f"Vocabulary(size={self.size})"


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (L,) int64
    positions: np.ndarray  # (L, 3) int64, PAD_POSITION rows for PAD slots
    k: int

    @property
    def length(self) -> int:
        return len(self.tokens)


# -- parsing ---------------------------------------------------------------

_FIELDS = ("house_id", "x", "y", "z", "block_id", "t")


def _parse_record(line: str) -> BlockPlacement:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise VoxelDataError(f"invalid JSON ({e.msg})") from None
    if not isinstance(rec, dict):
        raise VoxelDataError("record is not an object")
    missing = [f for f in _FIELDS if f not in rec]
    if missing:
        raise VoxelDataError(f"missing field(s) {', '.join(missing)}")
    vals = {}
    for f in _FIELDS[1:]:
        v = rec[f]
        if isinstance(v, bool) or not isinstance(v, int):
            raise VoxelDataError(f"field {f} is not an integer: {v!r}")
        vals[f] = v
    if not (0 <= vals["block_id"] <= MAX_BLOCK_ID):
        raise VoxelDataError(f"block_id {vals['block_id']} outside [0, {MAX_BLOCK_ID}]")
    return BlockPlacement(str(rec["house_id"]), **vals)


def parse_placements(
    stream: Iterable[str], strict: bool = True
) -> list[tuple[str, list[BlockPlacement]]]:
    """Parse newline-delimited JSON placement records, grouped per house.

    Houses come out in order of first appearance, each with its placements
    stably sorted by timestamp. Bad lines raise :class:`PlacementParseError`
    (all of them are collected first); with ``strict=False`` they are logged
    and skipped instead.
    """
    houses: dict[str, list[BlockPlacement]] = {}
    errors: list[tuple[int, str]] = []
    total = 0
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        total += 1
        try:
            p = _parse_record(line)
        except VoxelDataError as e:
            errors.append((lineno, str(e)))
            continue
        houses.setdefault(p.house_id, []).append(p)
    if errors:
        if strict:
            raise PlacementParseError(errors, total)
        logger.warning("skipped %d of %d malformed placement records", len(errors), total)
    return [(h, sorted(ps, key=lambda p: p.t)) for h, ps in houses.items()]


def voxelize(placements: Sequence[BlockPlacement], dim: int) -> VoxelGrid:
    """Replay placements into a grid anchored at the origin.

    Later writes win; ``block_id == 0`` (air) removes the voxel. The minimum
    corner of what remains is translated to ``(0, 0, 0)``.
    """
    if not placements:
        raise VoxelDataError("cannot voxelize an empty placement list")
    world: dict[Coord, int] = {}
    for p in sorted(placements, key=lambda p: p.t):
        key = (p.x, p.y, p.z)
        world.pop(key, None)
        if p.block_id != AIR:
            world[key] = p.block_id
    if not world:
        return VoxelGrid(dim, {})
    pts = np.array(list(world), dtype=np.int64)
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo + 1
    for axis, extent in zip("xyz", span):
        if extent > dim:
            raise StructureTooLarge(axis, int(extent), dim)
    cells = {
        (x - int(lo[0]), y - int(lo[1]), z - int(lo[2])): b for (x, y, z), b in world.items()
    }
    return VoxelGrid(dim, cells)


def filter_dataset(grids: Sequence[VoxelGrid], L: int, dim: int) -> list[VoxelGrid]:
    """Keep grids with ``1 <= k <= L`` whose extent fits in ``dim``."""
    kept = [g for g in grids if 1 <= g.k <= L and max(g.extent()) <= dim]
    logger.info("filter_dataset: retained %d, rejected %d", len(kept), len(grids) - len(kept))
    return kept


# -- sequences -------------------------------------------------------------

def extract_sequence(
    grid: VoxelGrid, L: int, vocab: Vocabulary, order: str = "lex"
) -> TokenSequence:
    """Lay the occupied voxels of ``grid`` out as ``L`` token slots.

    ``order="lex"`` sorts by (x, y, z); ``order="placement"`` keeps the order
    voxels were last written in (only meaningful for grids fresh from
    :func:`voxelize`).
    """
    if grid.k > L:
        raise SequenceOverflow(f"{grid.k} occupied voxels do not fit in {L} slots")
    if order == "lex":
        coords = sorted(grid.cells)
    elif order == "placement":
        coords = list(grid.cells)
    else:
        raise ValueError(f"unknown order {order!r}")
    tokens = np.full(L, vocab.pad, dtype=np.int64)
    positions = np.full((L, 3), PAD_POSITION, dtype=np.int64)
    if coords:
        tokens[: grid.k] = [vocab.encode(grid.cells[c]) for c in coords]
        positions[: grid.k] = coords
    return TokenSequence(tokens, positions, grid.k)


def occupancy_sequence(occ: OccupancyMap, L: int, vocab: Vocabulary) -> TokenSequence:
    """All-MASK sequence over the occupied slots of ``occ``; the rest PAD."""
    if occ.k > L:
        raise SequenceOverflow(f"{occ.k} occupied voxels do not fit in {L} slots")
    tokens = np.full(L, vocab.pad, dtype=np.int64)
    tokens[: occ.k] = vocab.mask
    positions = np.full((L, 3), PAD_POSITION, dtype=np.int64)
    if occ.k:
        positions[: occ.k] = occ.ordered()
    return TokenSequence(tokens, positions, occ.k)


def reconstruct(seq: TokenSequence, vocab: Vocabulary, dim: int) -> VoxelGrid:
    cells: dict[Coord, int] = {}
    for slot in range(seq.k):
        tok = int(seq.tokens[slot])
        if tok == vocab.mask:
            raise IncompleteSample(f"slot {slot} is still masked")
        if vocab.is_special(tok):
            raise VoxelDataError(f"slot {slot} holds special token {tok}")
        pos = tuple(int(c) for c in seq.positions[slot])
        if pos in cells:
            raise DuplicatePosition(f"position {pos} appears twice (slot {slot})")
        cells[pos] = vocab.decode(tok)
    return VoxelGrid(dim, cells)


def sparsity_stats(grids: Sequence[VoxelGrid], dim: int) -> dict:
    if not grids:
        raise VoxelDataError("sparsity_stats needs at least one grid")
    volume = dim**3
    background = np.array([1.0 - g.k / volume for g in grids])
    categories: Counter[int] = Counter()
    for g in grids:
        categories.update(g.cells.values())
    return {
        "count": len(grids),
        "mean_background": float(background.mean()),
        "background": background,
        "k_histogram": dict(sorted(Counter(g.k for g in grids).items())),
        "category_histogram": dict(sorted(categories.items())),
    }


# -- file formats ----------------------------------------------------------

def grid_to_json(grid: VoxelGrid) -> str:
    voxels = [{"x": x, "y": y, "z": z, "id": b} for (x, y, z), b in sorted(grid.cells.items())]
    return json.dumps({"dim": grid.dim, "voxels": voxels})


def grid_from_json(text: str) -> VoxelGrid:
    obj = json.loads(text)
    cells = {(v["x"], v["y"], v["z"]): v["id"] for v in obj["voxels"]}
    return VoxelGrid(int(obj["dim"]), cells)


def grid_to_bytes(grid: VoxelGrid) -> bytes:
    records = np.array(
        [(x, y, z, b) for (x, y, z), b in sorted(grid.cells.items())], dtype="<u2"
    ).reshape(-1, 4)
    return _SCFD_MAGIC + struct.pack("<II", grid.dim, grid.k) + records.tobytes()


def grid_from_bytes(data: bytes) -> VoxelGrid:
    if data[:4] != _SCFD_MAGIC:
        raise VoxelDataError("not a voxel file (bad magic)")
    dim, count = struct.unpack_from("<II", data, 4)
    body = data[12:]
    if len(body) != count * 8:
        raise VoxelDataError(f"expected {count} records, found {len(body) / 8:g}")
    recs = np.frombuffer(body, dtype="<u2").reshape(count, 4)
    return VoxelGrid(dim, {(int(x), int(y), int(z)): int(b) for x, y, z, b in recs})


def write_grid(grid: VoxelGrid, path: str | Path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(grid_to_json(grid))
    else:
        path.write_bytes(grid_to_bytes(grid))


def read_grid(path: str | Path) -> VoxelGrid:
    path = Path(path)
    if path.suffix == ".json":
        return grid_from_json(path.read_text())
    return grid_from_bytes(path.read_bytes())


def occupancy_to_json(occ: OccupancyMap) -> str:
    return json.dumps({"dim": occ.dim, "occupied": [list(c) for c in occ.ordered()]})


def occupancy_from_json(text: str) -> OccupancyMap:
    obj = json.loads(text)
    dim = int(obj["dim"])
    occupied = frozenset(tuple(int(v) for v in c) for c in obj["occupied"])
    for c in occupied:
        if len(c) != 3 or not all(0 <= v < dim for v in c):
            raise VoxelDataError(f"occupied coordinate {c} outside cube of side {dim}")
    return OccupancyMap(dim, occupied)


def save_dataset(
    directory: str | Path, grids: Sequence[VoxelGrid], vocab: Vocabulary, names: Sequence[str] = ()
) -> None:
    """Write grids plus vocabulary to ``directory`` (``structures.npz``, ``vocab.json``)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    counts = np.array([g.k for g in grids], dtype=np.int64)
    coords = np.zeros((int(counts.sum()), 3), dtype=np.int64)
    ids = np.zeros(int(counts.sum()), dtype=np.int64)
    i = 0
    for g in grids:
        for c, b in g.cells.items():
            coords[i] = c
            ids[i] = b
            i += 1
    np.savez(
        d / "structures.npz",
        dims=np.array([g.dim for g in grids], dtype=np.int64),
        counts=counts,
        coords=coords,
        ids=ids,
        names=np.array(list(names) or [str(n) for n in range(len(grids))]),
    )
    (d / "vocab.json").write_text(vocab.to_json())


def load_dataset(directory: str | Path) -> tuple[list[VoxelGrid], Vocabulary]:
    d = Path(directory)
    vocab = Vocabulary.from_json((d / "vocab.json").read_text())
    with np.load(d / "structures.npz") as z:
        dims, counts, coords, ids = z["dims"], z["counts"], z["coords"], z["ids"]
    grids = []
    start = 0
    for dim, n in zip(dims, counts):
        cells = {tuple(int(v) for v in coords[j]): int(ids[j]) for j in range(start, start + n)}
        grids.append(VoxelGrid(int(dim), cells))
        start += n
    return grids, vocab


def read_placements(path: str | Path, strict: bool = True) -> list[tuple[str, list[BlockPlacement]]]:
    with open(path) as fh:
        return parse_placements(fh, strict=strict)


def stack_sequences(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays ``(tokens (B, L), positions (B, L, 3), k (B,))``."""
    return (
        np.stack([s.tokens for s in seqs]),
        np.stack([s.positions for s in seqs]),
        np.array([s.k for s in seqs], dtype=np.int64),
    )

