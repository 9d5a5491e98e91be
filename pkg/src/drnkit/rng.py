"""Seeded random generation with named substreams and serializable state."""

from __future__ import annotations

import zlib

import numpy as np

# PCG64 state is a pair of 128-bit integers plus a 32-bit uint carry.
# Serialized as 16-bit words so every word is exactly representable in float32
# (the checkpoint container stores float32 payloads only).
_WORDS_128 = 8
_WORDS_32 = 2
STATE_WORD_COUNT = 2 * _WORDS_128 + 1 + _WORDS_32


def _to_words(value: int, count: int) -> list[int]:
    return [(value >> (16 * i)) & 0xFFFF for i in range(count)]


def _from_words(words: list[int]) -> int:
    return sum(int(w) << (16 * i) for i, w in enumerate(words))


class Rng:
    """PCG64-backed generator with reproducible, platform-independent streams.

    The same seed yields the same draw sequence everywhere. ``child(name)``
    derives an independent stream keyed by the name, so corpus generation,
    weight init, and the training loop never share draws.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] | None = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = _key if _key is not None else (self.seed,)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(list(self._key)))
        )

    def child(self, name: str) -> "Rng":
        """Independent substream; same (seed, name) always gives the same stream."""
        tag = zlib.crc32(name.encode("utf-8"))
        return Rng(self.seed, _key=self._key + (tag,))

    # -- draws ------------------------------------------------------------

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def random(self, size=None, dtype=np.float64) -> np.ndarray:
        return self._gen.random(size, dtype=dtype)

    def integers(self, low: int, high: int, size=None):
        """Draw integers in [low, high) like numpy's Generator.integers."""
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # -- state capture -----------------------------------------------------

    def state_words(self) -> list[int]:
        """Generator state as 16-bit words (checkpoint-friendly encoding)."""
        st = self._gen.bit_generator.state
        words = _to_words(st["state"]["state"], _WORDS_128)
        words += _to_words(st["state"]["inc"], _WORDS_128)
        words.append(int(st["has_uint32"]) & 0xFFFF)
        words += _to_words(int(st["uinteger"]), _WORDS_32)
        return words

    def set_state_words(self, words) -> None:
        words = [int(w) for w in words]
        if len(words) != STATE_WORD_COUNT:
            raise ValueError(
                f"rng state needs {STATE_WORD_COUNT} words, got {len(words)}"
            )
        st = self._gen.bit_generator.state
        st["state"]["state"] = _from_words(words[:_WORDS_128])
        st["state"]["inc"] = _from_words(words[_WORDS_128 : 2 * _WORDS_128])
        st["has_uint32"] = words[2 * _WORDS_128]
        st["uinteger"] = _from_words(words[2 * _WORDS_128 + 1 :])
        self._gen.bit_generator.state = st
