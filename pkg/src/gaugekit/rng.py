"""Counter-based random streams for reproducible parallel simulation.

A stream is identified by ``(master_seed, stream_index)``. Its key is a
64-bit avalanche mix of both words, and its j-th uniform is the SplitMix64
output for state ``key + (j + 1) * GOLDEN``. Because every draw is a pure
function of (key, counter), a replication produces the same numbers no
matter which worker computes it or how replications are batched.

Normal variates use the Marsaglia polar method on consecutive uniform
pairs; chi-square variates use the Marsaglia-Tsang gamma sampler fed from
dedicated sub-streams.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TWO_M53 = 2.0 ** -53

_U_GOLDEN = np.uint64(GOLDEN)
_U_M1 = np.uint64(_M1)
_U_M2 = np.uint64(_M2)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))

# sub-stream tags
TAG_NORMAL = 1
TAG_GAMMA_U = 2
TAG_GAMMA_E = 3


def mix64(z):
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def stream_key(master_seed, stream_index, tag=0):
    """64-bit key of the stream ``(master_seed, stream_index)`` and sub-stream ``tag``."""
    for name, v in (("master_seed", master_seed), ("stream_index", stream_index)):
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= MASK64:
            raise DomainError(f"{name} must be an unsigned 64-bit integer, got {v!r}")
    k = mix64(int(master_seed) ^ mix64(GOLDEN + int(stream_index)))
    k = mix64(k + (int(stream_index) * GOLDEN & MASK64))
    if tag:
        k = mix64(k ^ mix64(tag * _M2))
    return k


def stream_keys(master_seed, indices, tag=0):
    """Vector of stream keys for the replication indices ``indices``.

    Same values as :func:`stream_key` applied element-wise.
    """
    stream_key(master_seed, 0)
    idx = np.asarray(indices, dtype=np.uint64)
    seed = np.uint64(int(master_seed))
    with np.errstate(over="ignore"):
        k = _mix_array(seed ^ _mix_array(_U_GOLDEN + idx))
        k = _mix_array(k + idx * _U_GOLDEN)
        if tag:
            k = _mix_array(k ^ np.uint64(mix64(tag * _M2)))
    return k


def subkeys(keys, tag):
    """Derive sub-stream keys from an array of stream keys."""
    t = np.uint64(mix64(tag * _M2))
    with np.errstate(over="ignore"):
        return _mix_array(np.asarray(keys, dtype=np.uint64) ^ t)


def _mix_array(z):
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> _S30)) * _U_M1
    z = (z ^ (z >> _S27)) * _U_M2
    return z ^ (z >> _S31)


def uniforms(keys, start, count):
    """Uniforms in [0, 1) at counters ``start .. start+count-1`` for each key.

    Returns an array of shape ``(len(keys), count)``.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    ctr = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = keys[:, None] + ctr[None, :] * _U_GOLDEN
        z = _mix_array(state)
    return (z >> _S11).astype(np.float64) * _TWO_M53


def _polar_pairs(keys, first_pair, n_pairs):
    """Candidate polar pairs; returns (accept mask, z1, z2), each (len(keys), n_pairs)."""
    u = uniforms(keys, 2 * first_pair, 2 * n_pairs)
    v1 = 2.0 * u[:, 0::2] - 1.0
    v2 = 2.0 * u[:, 1::2] - 1.0
    s = v1 * v1 + v2 * v2
    ok = (s > 0.0) & (s < 1.0)
    s_safe = np.where(ok, s, 0.5)
    f = np.sqrt(-2.0 * np.log(s_safe) / s_safe)
    return ok, v1 * f, v2 * f


def normals(keys, n):
    """First ``n`` standard normals of each stream; shape ``(len(keys), n)``.

    The stream's normals are the accepted polar pairs taken in counter order,
    so row i depends only on ``keys[i]``.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    rows = len(keys)
    out = np.empty((rows, n), dtype=np.float64)
    if rows == 0 or n == 0:
        return out
    need = (n + 1) // 2
    filled = np.zeros(rows, dtype=np.int64)
    pending = np.arange(rows)
    next_pair = 0
    block = int(need * 1.3) + 8
    while pending.size:
        ok, z1, z2 = _polar_pairs(keys[pending], next_pair, block)
        rank = np.cumsum(ok, axis=1) - 1 + filled[pending][:, None]
        take = ok & (rank < need)
        r_idx, c_idx = np.nonzero(take)
        dest = rank[r_idx, c_idx]
        rows_abs = pending[r_idx]
        pos1 = 2 * dest
        out[rows_abs, pos1] = z1[r_idx, c_idx]
        pos2 = pos1 + 1
        m2 = pos2 < n
        out[rows_abs[m2], pos2[m2]] = z2[r_idx[m2], c_idx[m2]]
        filled[pending] += take.sum(axis=1)
        next_pair += block
        pending = pending[filled[pending] < need]
        block = 8
    return out


def _gamma_mt(keys, shape):
    """Marsaglia-Tsang Gamma(shape, 1) for shape >= 1, one draw per key."""
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    nkeys = subkeys(keys, 11)
    ukeys = subkeys(keys, 12)
    rows = len(keys)
    out = np.empty(rows)
    pending = np.arange(rows)
    attempts = 8
    done_attempts = 0
    while pending.size:
        total = done_attempts + attempts
        x = normals(nkeys[pending], total)[:, done_attempts:]
        u = uniforms(ukeys[pending], done_attempts, attempts)
        t = 1.0 + c * x
        v = t * t * t
        pos = v > 0
        v_safe = np.where(pos, v, 1.0)
        with np.errstate(divide="ignore"):
            acc = pos & (np.log(u) < 0.5 * x * x + d - d * v_safe + d * np.log(v_safe))
        has = acc.any(axis=1)
        first = np.argmax(acc, axis=1)
        idx = np.nonzero(has)[0]
        out[pending[idx]] = d * v_safe[idx, first[idx]]
        pending = pending[~has]
        done_attempts = total
        attempts *= 2
    return out


def gammas(keys, shape):
    """One Gamma(shape, 1) variate per stream key."""
    if not shape > 0:
        raise DomainError(f"shape must be > 0, got {shape!r}")
    keys = np.asarray(keys, dtype=np.uint64)
    if shape >= 1.0:
        return _gamma_mt(keys, shape)
    g = _gamma_mt(keys, shape + 1.0)
    u = uniforms(subkeys(keys, 13), 0, 1)[:, 0]
    # u may be exactly 0 with probability 2**-53
    return g * np.power(np.where(u > 0, u, _TWO_M53), 1.0 / shape)


def chi_squares(keys, df):
    """One chi-square(df) variate per stream key."""
    return 2.0 * gammas(keys, 0.5 * df)


class RngStream:
    """A single replication's random stream.

    Identical ``(master_seed, stream_index)`` always yields the identical
    sequence; the scalar draws agree bit-for-bit with :func:`normals`.
    """

    def __init__(self, master_seed, stream_index=0):
        self.master_seed = int(master_seed)
        self.stream_index = int(stream_index)
        self.key = stream_key(master_seed, stream_index)
        self._nkey = np.array([self.key], dtype=np.uint64)
        self._pair = 0
        self._spare = None

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index})"

    def normal(self):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        while True:
            ok, z1, z2 = _polar_pairs(self._nkey, self._pair, 1)
            self._pair += 1
            if ok[0, 0]:
                self._spare = float(z2[0, 0])
                return float(z1[0, 0])


def sample_normal(stream, mean=0.0, sd=1.0):
    """Draw ``mean + sd * Z`` from ``stream``."""
    if not (isinstance(sd, (int, float)) and math.isfinite(sd) and sd > 0):
        raise DomainError(f"sd must be > 0, got {sd!r}")
    if not math.isfinite(mean):
        raise DomainError(f"mean must be finite, got {mean!r}")
    return mean + sd * stream.normal()
