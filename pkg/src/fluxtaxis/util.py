"""Shared plumbing: seeded rng streams, binary column I/O, small hashing helpers."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

# Stream labels are hashed into integers so rng keys stay readable at call
# sites while remaining stable across runs.
_LABEL_SPACE = 2**31 - 1


def _label_int(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % _LABEL_SPACE


def rng_from_key(*key: int | str) -> np.random.Generator:
    """Deterministic generator for a hierarchical key.

    Keys mix integers (seeds, indices) and short string labels; the same key
    always yields the same stream, and distinct keys yield independent
    streams. All randomness in the package flows through these keys.
    """
    entropy = [k if isinstance(k, int) else _label_int(k) for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def write_f64(path: Path | str, array: np.ndarray) -> None:
    """Write a flat little-endian float64 column file."""
    np.asarray(array, dtype="<f8").ravel().tofile(path)


def read_f64(path: Path | str, shape: tuple[int, ...] | None = None) -> np.ndarray:
    data = np.fromfile(path, dtype="<f8")
    return data if shape is None else data.reshape(shape)


def write_i64(path: Path | str, array: np.ndarray) -> None:
    np.asarray(array, dtype="<i8").ravel().tofile(path)


def read_i64(path: Path | str, shape: tuple[int, ...] | None = None) -> np.ndarray:
    data = np.fromfile(path, dtype="<i8")
    return data if shape is None else data.reshape(shape)


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_kv_manifest(path: Path | str, entries: dict[str, object]) -> None:
    """Write a flat ``key = value`` manifest (one entry per line, sorted)."""
    lines = [f"{k} = {entries[k]}" for k in sorted(entries)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv_manifest(path: Path | str) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
