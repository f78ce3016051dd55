"""Shared generators for seeded channel/slot test instances."""

import numpy as np
import pytest

from slp.channel import ChannelConfig, gen_block
from slp.ci import build_slot, build_slots, coupling_many
from slp.constellation import make_spec


def make_instance(modulation: str, k: int, rng: np.random.Generator):
    """One (block, slot, coupling) triple from a caller-owned stream."""
    spec = make_spec(modulation)
    block, _ = gen_block(ChannelConfig(k=k), rng=rng)
    slot = build_slot(spec, spec.points[rng.integers(0, spec.order, k)])
    vmat = coupling_many(block.pair_gram, slot.comps[None])[0]
    return spec, block, slot, vmat


def make_batch(modulation: str, k: int, n: int, rng: np.random.Generator):
    """One block with ``n`` random slots and their stacked couplings."""
    spec = make_spec(modulation)
    block, _ = gen_block(ChannelConfig(k=k), rng=rng)
    idx = rng.integers(0, spec.order, size=(n, k))
    batch = build_slots(spec, spec.points[idx])
    return spec, block, idx, batch, coupling_many(block.pair_gram, batch.comps)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
