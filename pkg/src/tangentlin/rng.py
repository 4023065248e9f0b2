"""Counter-based random streams.

Every draw in the package comes from a Philox generator keyed by an explicit
``(seed, stream)`` pair, so a single layer of a single sweep point can be
regenerated without replaying anything that came before it.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _stream_id(labels):
    text = "/".join(str(label) for label in labels)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def split_seed(seed):
    """Normalize a seed value into ``(root, labels)``.

    A seed value is either a non-negative int or a tuple whose first element
    is the int root and whose remaining elements label a sub-stream.
    """
    if isinstance(seed, (tuple, list)):
        if not seed:
            raise ValueError("empty seed tuple")
        root, labels = seed[0], tuple(seed[1:])
    else:
        root, labels = seed, ()
    root = int(root)
    if root < 0 or root > _MASK64:
        raise ValueError(f"seed must be in [0, 2**64), got {root}")
    return root, labels


def stream(seed, *labels):
    """Return a fresh generator for the sub-stream ``labels`` of ``seed``."""
    root, base = split_seed(seed)
    key = np.array([root, _stream_id(base + labels)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def child(seed, *labels):
    """Extend a seed value with more stream labels (no draws performed)."""
    root, base = split_seed(seed)
    return (root,) + base + labels
