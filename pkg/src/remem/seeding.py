"""Labelled sub-seeds: every random stream derives from one root seed."""

import hashlib


def derive_seed(seed: int, *purpose) -> int:
    key = ":".join([str(int(seed)), *map(str, purpose)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1
