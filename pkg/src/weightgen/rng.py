"""Named deterministic rng streams fanned out from a single root seed.

Every source of randomness in the pipeline (zoo training, teacher sampling,
the two cutoff masks, parameter init, batch order) draws from its own named
stream, so changing one knob never perturbs the others.
"""
from __future__ import annotations

import hashlib

import torch


def stream_seed(root_seed: int, name: str) -> int:
    """Derive a 63-bit seed for the named stream from the root seed."""
    digest = hashlib.sha256(f"{root_seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def make_stream(root_seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stream_seed(root_seed, name))
    return gen


class RngHub:
    """A set of named streams whose joint state can be checkpointed exactly."""

    def __init__(self, root_seed: int, names: tuple[str, ...]):
        self.root_seed = root_seed
        self.streams = {name: make_stream(root_seed, name) for name in names}

    def __getitem__(self, name: str) -> torch.Generator:
        return self.streams[name]

    def state_dict(self) -> dict:
        return {name: gen.get_state() for name, gen in self.streams.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, blob in state.items():
            self.streams[name].set_state(blob)
