"""Named contiguous parameter blocks over a flat vector."""

from dataclasses import dataclass

import numpy as np

from ..errors import RigfitError


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    length: int


class ParamLayout:
    """Contiguous, non-overlapping named blocks covering [0, total).

    Blocks can be frozen; frozen dimensions get zero Jacobian columns and are
    never moved by the solvers.
    """

    def __init__(self, blocks):
        """blocks: iterable of (name, length)."""
        off = 0
        self.blocks = []
        seen = set()
        for name, length in blocks:
            if name in seen:
                raise RigfitError(f"duplicate block name {name!r}")
            if length < 0:
                raise RigfitError(f"block {name!r} has negative length")
            seen.add(name)
            self.blocks.append(Block(name, off, length))
            off += length
        self.total = off
        self._by_name = {b.name: b for b in self.blocks}
        self.frozen = set()

    def __contains__(self, name):
        return name in self._by_name

    def block(self, name):
        return self._by_name[name]

    def slice(self, name):
        b = self._by_name[name]
        return slice(b.offset, b.offset + b.length)

    def freeze(self, *names):
        for name in names:
            if name not in self._by_name:
                raise RigfitError(f"unknown block {name!r}")
            self.frozen.add(name)
        return self

    def unfreeze(self, *names):
        for name in names:
            self.frozen.discard(name)
        return self

    def freeze_all_except(self, *names):
        for name in names:
            if name not in self._by_name:
                raise RigfitError(f"unknown block {name!r}")
        self.frozen = {b.name for b in self.blocks if b.name not in names}
        return self

    def free_mask(self):
        mask = np.ones(self.total, dtype=bool)
        for name in self.frozen:
            mask[self.slice(name)] = False
        return mask

    def free_indices(self):
        return np.flatnonzero(self.free_mask())

    def pack(self, parts):
        """Assemble a flat vector from a {name: array} mapping."""
        x = np.zeros(self.total)
        for b in self.blocks:
            arr = np.asarray(parts[b.name], dtype=float).ravel()
            if arr.size != b.length:
                raise RigfitError(
                    f"block {b.name!r} expects {b.length} values, got {arr.size}")
            x[b.offset:b.offset + b.length] = arr
        return x

    def unpack(self, x):
        """Split a flat vector (or Dual) into {name: block} views."""
        return {b.name: x[self.slice(b.name)] for b in self.blocks}
