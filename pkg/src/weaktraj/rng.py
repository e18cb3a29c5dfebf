"""Deterministic random substreams keyed by (master seed, repetition, role)."""

from __future__ import annotations

import numpy as np

from .model import Seed

RECORD = 0
TOMOGRAPHY = 1
HERALD = 2


def split_seed(seed: Seed):
    if isinstance(seed, (tuple, list)):
        master, index = seed
    else:
        master, index = seed, 0
    master, index = int(master), int(index)
    if master < 0 or index < 0:
        raise ValueError("seeds must be non-negative integers")
    return master, index


def substream(seed: Seed, role: int) -> np.random.Generator:
    """Independent generator for one repetition and one use.

    A bare integer seed is the same as ``(seed, 0)``, so a standalone
    simulation with seed ``m`` reproduces repetition 0 of a dataset with
    master seed ``m``.
    """
    master, index = split_seed(seed)
    sequence = np.random.SeedSequence(master, spawn_key=(index, role))
    return np.random.Generator(np.random.PCG64(sequence))
