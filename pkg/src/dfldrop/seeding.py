"""Named random streams derived from one master seed.

Each stream is keyed by (master seed, fold, component tag), so results never
depend on the order in which folds or cells are executed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

COMPONENTS = ("split", "partition", "init", "rounds", "dropout", "recon")


def _tag(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


@dataclass(frozen=True)
class SeedPlan:
    master: int
    fold: int = 0

    def for_fold(self, fold: int) -> "SeedPlan":
        return SeedPlan(self.master, fold)

    def sequence(self, component: str) -> np.random.SeedSequence:
        return np.random.SeedSequence([int(self.master), int(self.fold), _tag(component)])

    def rng(self, component: str) -> np.random.Generator:
        return np.random.default_rng(self.sequence(component))
