"""Deterministic seed derivation.

A single root seed is fanned out into independent named streams so that
changing one consumer (say, validation masking) never shifts the random
numbers seen by another.  Derivation is a stable hash of the root seed and
the name path, so it is reproducible across processes and platforms and
independent of execution order.
"""

from __future__ import annotations

import hashlib

_MASK_63 = (1 << 63) - 1


def derive_seed(root: int, *names: object) -> int:
    """Derive a child seed from ``root`` and a path of names.

    Args:
        root: Root seed of the run.
        names: Any mix of strings/ints identifying the consumer, e.g.
            ``("pretrain", "masks", epoch)``.

    Returns:
        A non-negative int64 seed, deterministic in (root, names).
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode("utf-8"))
    for name in names:
        h.update(b"\x1f")  # separator so ("ab","c") != ("a","bc")
        h.update(str(name).encode("utf-8"))
    return int.from_bytes(h.digest(), "little") & _MASK_63
