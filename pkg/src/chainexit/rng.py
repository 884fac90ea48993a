"""Counter-based random numbers keyed by ``(seed, stream, step, slot)``.

Philox4x32-10 maps a 128-bit counter and a 64-bit key to four 32-bit words.
The key is the seed.  The counter is ``(word, step, stream_lo, stream_hi)``,
where ``word`` selects a pair of normal slots (``slot // 2``) or, with the
:data:`UNIFORM_TAG` bit set, a uniform channel.  Any draw can be recomputed
independently of every other draw, which makes path ``p`` of a Monte Carlo run
identical no matter how paths are split between workers.

Each Philox block gives two 53-bit uniforms ``u1 in (0, 1]`` and
``u2 in [0, 1)``; the Box-Muller pair ``r*cos(2 pi u2), r*sin(2 pi u2)`` with
``r = sqrt(-2 log u1)`` feeds slots ``2q`` and ``2q + 1``.
"""
from __future__ import annotations

import numpy as np

__all__ = ["philox4x32", "normals", "path_normals", "uniforms", "UNIFORM_TAG"]

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

UNIFORM_TAG = 0x40000000
_TWO_M53 = 2.0 ** -53


def philox4x32(c0, c1, c2, c3, k0, k1, rounds: int = 10):
    """Vectorised Philox4x32 block function; inputs broadcast, outputs uint64 words < 2**32."""
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in (c0, c1, c2, c3))
    k0 = np.asarray(k0, dtype=np.uint64) & _MASK
    k1 = np.asarray(k1, dtype=np.uint64) & _MASK
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = ((p1 >> _S32) ^ c1 ^ k0, p1 & _MASK, (p0 >> _S32) ^ c3 ^ k1, p0 & _MASK)
    return c0, c1, c2, c3


def _split_seed(seed: int):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def _block_uniforms(word, step, stream, seed):
    stream = np.asarray(stream, dtype=np.uint64)
    k0, k1 = _split_seed(seed)
    w = philox4x32(word, step, stream & _MASK, stream >> _S32, k0, k1)
    a = ((w[0] | (w[1] << _S32)) >> np.uint64(11)).astype(np.float64)
    b = ((w[2] | (w[3] << _S32)) >> np.uint64(11)).astype(np.float64)
    return (a + 1.0) * _TWO_M53, b * _TWO_M53


def normal_pair(pair: int, step: int, stream, seed: int):
    """Normals for slots ``2*pair`` and ``2*pair + 1`` of every stream in ``stream``."""
    u1, u2 = _block_uniforms(pair, step, stream, seed)
    r = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    return r * np.cos(ang), r * np.sin(ang)


def normals(nslots: int, step: int, stream, seed: int) -> np.ndarray:
    """Standard normals for slots ``0..nslots-1``; shape ``(len(stream), nslots)``."""
    stream = np.atleast_1d(np.asarray(stream, dtype=np.uint64))
    out = np.empty((stream.size, nslots))
    for q in range((nslots + 1) // 2):
        z0, z1 = normal_pair(q, step, stream, seed)
        out[:, 2 * q] = z0
        if 2 * q + 1 < nslots:
            out[:, 2 * q + 1] = z1
    return out


def path_normals(nslots: int, nsteps: int, stream: int, seed: int) -> np.ndarray:
    """Normals of one stream for steps ``0..nsteps-1``; shape ``(nsteps, nslots)``.

    Row ``k`` equals ``normals(nslots, k, stream, seed)[0]``.
    """
    steps = np.arange(nsteps, dtype=np.uint64)
    out = np.empty((nsteps, nslots))
    for q in range((nslots + 1) // 2):
        z0, z1 = normal_pair(q, steps, np.uint64(stream), seed)
        out[:, 2 * q] = z0
        if 2 * q + 1 < nslots:
            out[:, 2 * q + 1] = z1
    return out


def uniforms(channel: int, step: int, stream, seed: int) -> np.ndarray:
    """One uniform in ``[0, 1)`` per stream from channel ``channel``."""
    return _block_uniforms(UNIFORM_TAG | channel, step, stream, seed)[1]
