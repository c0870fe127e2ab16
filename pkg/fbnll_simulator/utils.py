"""
This module contains helper functions shared by the pipeline stages and the CLI tool.
The functions derive reproducible random streams, validate file paths and serialize
reports to canonical JSON.
"""

import hashlib
import json
import os
import zlib
from typing import Any, Union

import numpy as np

Key = Union[int, str]


def stable_key(key: Key) -> int:
    """
    Maps a seed key to a non-negative integer that is stable across interpreter runs.

    Args:
        key (int | str): An integer index or a textual stage tag

    Returns:
        int: The integer used as a SeedSequence entropy word
    """
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("Seed keys must be integers or strings, not booleans")
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"Seed keys must be non-negative, got {key}")
        return int(key)
    # crc32 instead of hash(): str hashing is salted per process
    return zlib.crc32(key.encode("utf-8"))


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """
    Creates an independent random generator for (seed, key...).

    The same seed and keys always produce the same stream, and different key tuples
    produce statistically independent streams. Stages use this to give every user,
    round or retry its own sub-seed.

    Args:
        seed (int): The experiment master seed (64-bit)
        *keys: Stage tags and indices identifying the consumer

    Returns:
        numpy.random.Generator: The derived generator
    """
    entropy = [stable_key(seed)] + [stable_key(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *keys: Key) -> int:
    """Like derive_rng, but returns a 63-bit integer seed for APIs that take plain ints."""
    entropy = [stable_key(seed)] + [stable_key(k) for k in keys]
    words = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(words[0]) << 31) ^ int(words[1])


def get_file_path(path: str, arg_name: str) -> str:
    """
    Returns a validated absolute file path.

    Args:
        path (str): The path as given by the user or config
        arg_name (str): Name used in the error message

    Returns:
        str: The absolute path

    Raises:
        FileNotFoundError: If the path does not exist or is not a file
    """
    abs_path = os.path.abspath(path)
    if not (os.path.exists(abs_path) and os.path.isfile(abs_path)):
        raise FileNotFoundError(f"The {arg_name} '{abs_path}' does not exist or is not a file.")
    return abs_path


def to_builtin(value: Any) -> Any:
    """Recursively converts numpy scalars and arrays into JSON-serializable builtins."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def dumps_json(data: Any, indent: int = 2) -> str:
    """Serializes to JSON with sorted keys so equal content gives equal bytes."""
    return json.dumps(to_builtin(data), indent=indent, sort_keys=True, ensure_ascii=False)


def write_json(path: str, data: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_json(data))
        f.write("\n")


def read_json(path: str) -> Any:
    with open(get_file_path(path, "JSON file"), "r", encoding="utf-8") as f:
        return json.load(f)


def config_hash(data: Any) -> str:
    """SHA-256 of the canonical JSON form of a config dictionary."""
    canonical = json.dumps(to_builtin(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
