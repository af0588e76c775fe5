"""Counter-based random streams.

Draws come from the Philox-4x64 bit generator keyed by ``(seed, stream)``;
Gaussians are produced with Box-Muller from 53-bit uniforms so the
sequence for a given key never depends on numpy's sampling algorithms.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / 9007199254740992.0


def _stream_id(labels: tuple) -> int:
    text = "/".join(repr(x) for x in labels).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


class RngStream:
    """Reproducible random stream identified by ``(seed, stream, counter)``.

    ``counter`` counts raw 64-bit words consumed so far.
    """

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        # explicit uint64: a plain list with words >= 2**63 would pass through float64
        self._gen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self.counter = 0
        if counter:
            self.skip(counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def fork(self, *labels) -> "RngStream":
        """Independent child stream derived from this stream's key and ``labels``.

        Forking does not advance the parent.
        """
        return RngStream(self.seed, _stream_id((self.stream,) + labels))

    def skip(self, n: int) -> None:
        self._gen.random_raw(int(n))
        self.counter += int(n)

    def raw(self, n: int) -> np.ndarray:
        out = self._gen.random_raw(int(n))
        self.counter += int(n)
        return np.asarray(out, dtype=np.uint64)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws in (0, 1], binary64."""
        n = int(np.prod(shape, dtype=np.int64))
        words = self.raw(n)
        u = ((words >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws, binary64, via Box-Muller.

        Each pair of uniforms yields a cosine and a sine draw, interleaved.
        """
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform((pairs, 2))
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        phi = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(phi)
        z[:, 1] = r * np.sin(phi)
        return z.reshape(-1)[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of uniform keys; ties are impossible in practice at 53 bits
        return np.argsort(self.uniform(n), kind="stable")
