"""Neuron groupings and group-to-group connectivity masks.

A mask between two layers is an ``(n_in, n_out)`` boolean matrix.  For the
group-to-group construction every entry is an independent Bernoulli draw:
probability ``p`` when source and destination neuron share a group index,
``p_prime`` otherwise, giving an approximately block-diagonal pattern
(exactly block-diagonal once rows/columns are sorted by group).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import rng
from .errors import ConfigurationError, ParseError

GROUPINGS = ("index", "random", "mixer", "interleaved")


@dataclass(frozen=True)
class GroupAssignment:
    layer_size: int
    group_count: int
    assignment: np.ndarray
    strategy: str = "index"

    def __post_init__(self):
        a = np.asarray(self.assignment)
        if a.shape != (self.layer_size,):
            raise ConfigurationError("assignment length does not match layer_size")
        counts = np.bincount(a, minlength=self.group_count)
        if len(counts) != self.group_count or np.any(counts != self.layer_size // self.group_count):
            raise ConfigurationError("assignment is not a balanced partition")

    @property
    def group_size(self) -> int:
        return self.layer_size // self.group_count

    def members(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == group)

    def to_dict(self) -> dict:
        return {
            "layer_size": self.layer_size,
            "group_count": self.group_count,
            "strategy": self.strategy,
            "assignment": self.assignment.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupAssignment":
        return cls(
            int(d["layer_size"]),
            int(d["group_count"]),
            np.asarray(d["assignment"], dtype=np.int64),
            d.get("strategy", "index"),
        )

    def __eq__(self, other):
        if not isinstance(other, GroupAssignment):
            return NotImplemented
        return (
            self.layer_size == other.layer_size
            and self.group_count == other.group_count
            and np.array_equal(self.assignment, other.assignment)
        )

    __hash__ = None


def _check_sizes(n: int, g: int) -> None:
    if n <= 0 or g <= 0:
        raise ConfigurationError(f"neuron count and group count must be positive (N={n}, G={g})")
    if n % g:
        raise ConfigurationError(f"group count {g} does not divide layer size {n}")


def partition_index(n: int, g: int) -> GroupAssignment:
    """Contiguous blocks: neuron ``l`` goes to group ``l // (n / g)``."""
    _check_sizes(n, g)
    return GroupAssignment(n, g, np.arange(n, dtype=np.int64) // (n // g), "index")


def partition_interleaved(n: int, g: int) -> GroupAssignment:
    """Neuron ``l`` goes to group ``l mod g``."""
    _check_sizes(n, g)
    return GroupAssignment(n, g, np.arange(n, dtype=np.int64) % g, "interleaved")


def partition_random(n: int, g: int, seed: int, layer_index: int = 0) -> GroupAssignment:
    """Seeded uniform balanced partition (a shuffled index partition)."""
    _check_sizes(n, g)
    base = np.arange(n, dtype=np.int64) // (n // g)
    gen = rng.stream(seed, rng.GROUPING, layer_index)
    return GroupAssignment(n, g, gen.permutation(base), "random")


def partition_mixer(n: int, g: int, layer_index: int) -> GroupAssignment:
    """Index grouping on even layers, interleaved grouping on odd layers."""
    if layer_index < 0:
        raise ConfigurationError("layer_index must be non-negative")
    part = partition_index(n, g) if layer_index % 2 == 0 else partition_interleaved(n, g)
    return GroupAssignment(n, g, part.assignment, "mixer")


def make_partition(strategy: str, n: int, g: int, layer_index: int, seed: int = 0) -> GroupAssignment:
    if strategy == "index":
        return partition_index(n, g)
    if strategy == "interleaved":
        return partition_interleaved(n, g)
    if strategy == "random":
        return partition_random(n, g, seed, layer_index)
    if strategy == "mixer":
        return partition_mixer(n, g, layer_index)
    raise ConfigurationError(f"unknown grouping strategy {strategy!r}; expected one of {GROUPINGS}")


@dataclass
class ConnectivityMask:
    bits: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ConfigurationError("mask must be two-dimensional")

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def active_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def density(self) -> float:
        return self.active_count / self.bits.size

    def source_groups(self) -> GroupAssignment | None:
        d = self.provenance.get("src")
        return GroupAssignment.from_dict(d) if d else None

    def dest_groups(self) -> GroupAssignment | None:
        d = self.provenance.get("dst")
        return GroupAssignment.from_dict(d) if d else None

    def copy(self) -> "ConnectivityMask":
        return ConnectivityMask(self.bits.copy(), json.loads(json.dumps(self.provenance)))


def _check_prob(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")


def build_g2g_mask(
    src: GroupAssignment,
    dst: GroupAssignment,
    p: float,
    p_prime: float,
    seed: int,
    layer_index: int = 0,
) -> ConnectivityMask:
    if src.group_count != dst.group_count:
        raise ConfigurationError(
            f"source has {src.group_count} groups but destination has {dst.group_count}"
        )
    _check_prob("p", p)
    _check_prob("p_prime", p_prime)
    if p_prime > p:
        raise ConfigurationError(f"p_prime ({p_prime}) must not exceed p ({p})")
    same = src.assignment[:, None] == dst.assignment[None, :]
    prob = np.where(same, p, p_prime)
    # row-major draws from the layer's own substream
    u = rng.stream(seed, rng.MASK, layer_index).random(prob.shape)
    bits = u < prob
    prov = {
        "kind": "g2g",
        "p": float(p),
        "p_prime": float(p_prime),
        "seed": int(seed),
        "layer_index": int(layer_index),
        "src": src.to_dict(),
        "dst": dst.to_dict(),
    }
    return ConnectivityMask(bits, prov)


def build_er_mask(n_in: int, n_out: int, density: float, seed: int, layer_index: int = 0) -> ConnectivityMask:
    """Erdos-Renyi mask: each entry independently active with ``density``."""
    if n_in <= 0 or n_out <= 0:
        raise ConfigurationError("mask dimensions must be positive")
    _check_prob("density", density)
    u = rng.stream(seed, rng.MASK, layer_index).random((n_in, n_out))
    prov = {"kind": "er", "density": float(density), "seed": int(seed), "layer_index": int(layer_index)}
    return ConnectivityMask(u < density, prov)


def full_mask(n_in: int, n_out: int) -> ConnectivityMask:
    return ConnectivityMask(np.ones((n_in, n_out), dtype=bool), {"kind": "dense"})


def expected_density(p: float, p_prime: float, g: int) -> float:
    _check_prob("p", p)
    _check_prob("p_prime", p_prime)
    if g < 1:
        raise ConfigurationError("group count must be at least 1")
    return p / g + p_prime * (g - 1) / g


def block_densities(bits: np.ndarray, src: GroupAssignment, dst: GroupAssignment) -> np.ndarray:
    """``(G_src, G_dst)`` grid of the fraction of active entries per group pair."""
    s = np.eye(src.group_count)[src.assignment]
    d = np.eye(dst.group_count)[dst.assignment]
    counts = s.T @ bits.astype(np.float64) @ d
    sizes = np.outer(s.sum(0), d.sum(0))
    return counts / sizes


def mask_stats(mask: ConnectivityMask) -> dict:
    stats = {
        "rows": mask.rows,
        "cols": mask.cols,
        "active_count": mask.active_count,
        "density": mask.density,
        "kind": mask.provenance.get("kind", "unknown"),
    }
    src, dst = mask.source_groups(), mask.dest_groups()
    if src is not None and dst is not None:
        grid = block_densities(mask.bits, src, dst)
        stats["block_density"] = grid.tolist()
        diag = np.diag(grid)
        off = grid[~np.eye(grid.shape[0], dtype=bool)]
        stats["diagonal_block_density"] = float(diag.mean())
        stats["off_diagonal_block_density"] = float(off.mean()) if off.size else None
    return stats


# Binary mask file:
#   magic b"G2GMASK\0" | u16 version | u32 rows | u32 cols | u32 provenance length
#   | provenance (UTF-8 JSON) | row-major bitset, MSB first, padded to a byte
_MAGIC = b"G2GMASK\0"
_VERSION = 1
_HEADER = struct.Struct("<8sHIII")


def mask_to_bytes(mask: ConnectivityMask) -> bytes:
    prov = json.dumps(mask.provenance, sort_keys=True).encode("utf-8")
    head = _HEADER.pack(_MAGIC, _VERSION, mask.rows, mask.cols, len(prov))
    return head + prov + np.packbits(mask.bits.ravel()).tobytes()


def mask_from_bytes(buf: bytes) -> ConnectivityMask:
    if len(buf) < _HEADER.size:
        raise ParseError("mask file shorter than its header")
    magic, version, rows, cols, plen = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ParseError(f"bad mask magic {magic!r} at offset 0")
    if version != _VERSION:
        raise ParseError(f"unsupported mask format version {version}")
    off = _HEADER.size
    prov = json.loads(buf[off : off + plen].decode("utf-8"))
    off += plen
    nbytes = (rows * cols + 7) // 8
    payload = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=off) if len(buf) - off >= nbytes else None
    if payload is None:
        raise ParseError(f"mask payload truncated at offset {off}: need {nbytes} bytes, have {len(buf) - off}")
    bits = np.unpackbits(payload, count=rows * cols).reshape(rows, cols).astype(bool)
    return ConnectivityMask(bits, prov)


def save_mask(mask: ConnectivityMask, path) -> None:
    with open(path, "wb") as f:
        f.write(mask_to_bytes(mask))


def load_mask(path) -> ConnectivityMask:
    with open(path, "rb") as f:
        return mask_from_bytes(f.read())


def mask_summary_json(mask: ConnectivityMask, indent: int | None = 2) -> str:
    stats = mask_stats(mask)
    prov = {k: v for k, v in mask.provenance.items() if k not in ("src", "dst")}
    for side in ("src", "dst"):
        if side in mask.provenance:
            g = mask.provenance[side]
            prov[side] = {"strategy": g.get("strategy"), "group_count": g["group_count"], "layer_size": g["layer_size"]}
    stats["provenance"] = prov
    buf = io.StringIO()
    json.dump(stats, buf, indent=indent)
    return buf.getvalue()
