"""Seed derivation, RNG state (de)serialization, and content hashing.

All stochasticity in the toolkit flows through numpy Generators so that a
single run seed fully determines every draw. Sub-streams are derived from
the run seed plus a label path; the rule is:

    SeedSequence(entropy=(seed, sha256(label_0), sha256(label_1), ...))

where each label is hashed to a 64-bit integer. Labels are stable strings
("train", "probe", "refgen", ...) or integers (prompt/sample indices), so
independent pipeline stages never share a stream.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def _label_to_int(label: str | int) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *labels: str | int) -> np.random.Generator:
    """Return an independent Generator for (seed, *labels)."""
    entropy = [int(seed)] + [_label_to_int(lb) for lb in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a Generator's bit-generator state."""
    return json.loads(json.dumps(rng.bit_generator.state, default=int))


def restore_rng(state: dict) -> np.random.Generator:
    """Rebuild a Generator from a snapshot produced by :func:`rng_state`."""
    bit_gen_cls = getattr(np.random, state["bit_generator"])
    bit_gen = bit_gen_cls()
    bit_gen.state = state
    return np.random.Generator(bit_gen)


def state_digest(rng: np.random.Generator) -> str:
    """Short stable fingerprint of the current RNG state."""
    payload = json.dumps(rng_state(rng), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_json(obj: Any) -> str:
    """Content hash of any JSON-serializable object (key order independent)."""
    return hash_bytes(json.dumps(obj, sort_keys=True, default=str).encode("utf-8"))


def hash_state_dict(state: dict) -> str:
    """Content hash of a name->tensor mapping (order independent)."""
    h = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name]
        h.update(name.encode("utf-8"))
        h.update(str(tuple(tensor.shape)).encode("utf-8"))
        h.update(str(tensor.dtype).encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
