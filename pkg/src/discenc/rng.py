"""Named random-number sub-streams derived from one master seed.

Every source of randomness in a run (weight init, epoch shuffles, dropout
masks, generator noise, fake-document sampling) draws from its own stream,
so changing how one component consumes randomness never perturbs the others.
Streams are derived from the master seed with fixed spawn keys, which makes
runs replayable from the seed alone.
"""

from __future__ import annotations

import numpy as np

# Fixed stream ids; order must never change or old runs stop replaying.
STREAMS = {"init": 0, "shuffle": 1, "dropout": 2, "noise": 3, "sampler": 4}


def stream_rng(master_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for the named sub-stream, optionally keyed further (e.g. by epoch)."""
    if name not in STREAMS:
        raise ValueError(f"unknown rng stream {name!r}; expected one of {sorted(STREAMS)}")
    key = (STREAMS[name],) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=key)))


def epoch_shuffle_rng(master_seed: int, epoch: int) -> np.random.Generator:
    """Fresh shuffle stream per epoch, so resumes reproduce later epochs exactly."""
    return stream_rng(master_seed, "shuffle", epoch)


class RngHub:
    """Holds the live stateful streams of a training run (dropout, noise, sampler).

    The shuffle stream is re-derived per epoch and is not held here.  The hub
    state is a plain dict of bit-generator states, so a checkpoint can restore
    every stream to bit-identical continuation.
    """

    STATEFUL = ("dropout", "noise", "sampler")

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._gens = {name: stream_rng(self.master_seed, name) for name in self.STATEFUL}

    def get(self, name: str) -> np.random.Generator:
        return self._gens[name]

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in self._gens.items()}

    def set_state(self, state: dict) -> None:
        for name, st in state.items():
            self._gens[name].bit_generator.state = st
