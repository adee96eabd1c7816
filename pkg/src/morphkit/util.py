"""Seed derivation, deterministic JSON, checksums, and a worker pool.

Every randomized stage derives its generator from a stable hash of
(master seed, stage tag, item id), so outputs do not depend on iteration
or worker order.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(master_seed: int, *parts: object) -> int:
    """Stable 64-bit seed from a master seed and arbitrary tag parts."""
    text = ":".join([str(int(master_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def rng_for(master_seed: int, *parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *parts))


def round_half_away(value: float) -> int:
    """Round half away from zero (0.5 -> 1, -0.5 -> -1)."""
    if value >= 0:
        return int(math.floor(value + 0.5))
    return int(math.ceil(value - 0.5))


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Map preserving input order; results are independent of thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def json_round(value: Any, decimals: int = 6) -> Any:
    """Recursively round floats so serialized output is byte-stable."""
    if isinstance(value, float):
        return round(value, decimals)
    if isinstance(value, dict):
        return {k: json_round(v, decimals) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_round(v, decimals) for v in value]
    return value


def write_json(path: Path | str, payload: Any) -> None:
    """Deterministic JSON: sorted keys, 6-decimal floats, trailing newline."""
    text = json.dumps(json_round(payload), sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def checksum_tree(root: Path | str) -> dict[str, str]:
    """Relative path -> sha256 for every file under root, sorted."""
    root = Path(root)
    sums: dict[str, str] = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        sums[path.relative_to(root).as_posix()] = sha256_file(path)
    return sums


def iter_chunks(items: Iterable[T], size: int) -> Iterable[list[T]]:
    chunk: list[T] = []
    for item in items:
        chunk.append(item)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk
