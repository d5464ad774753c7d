"""Reproducible per-environment random streams for batched Monte-Carlo runs.

Every environment owns counter-based (Philox) streams split off a master seed
with ``numpy.random.SeedSequence``.  A stream's consumption depends only on its
own history, so trajectories are bit-identical no matter how environments are
batched or sharded across workers.
"""

import numpy as np
from scipy.special import gammaln

# Mean below which Poisson draws use inversion by sequential search; at or
# above it the transformed-rejection sampler (PTRS) takes over.
POISSON_INVERSION_CUTOFF = 10.0


def seed_root(seed):
    """Normalize an int seed or SeedSequence into a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def split_streams(seed, n):
    """Derive n child SeedSequences from a master seed, keyed by index."""
    return seed_root(seed).spawn(n)


class UniformSupply:
    """Buffered uniform draws from one Philox stream per environment.

    Stream i yields exactly the sequence ``Generator(Philox(seedseqs[i]))``
    would produce with repeated ``random()`` calls; buffering only batches the
    generation.  ``take`` consumes k consecutive values per selected stream.
    """

    def __init__(self, seedseqs, buf_size=4096):
        self.n = len(seedseqs)
        self.size = int(buf_size)
        self._gens = [np.random.Generator(np.random.Philox(ss)) for ss in seedseqs]
        self._buf = np.empty((self.n, self.size))
        self._pos = np.full(self.n, self.size, dtype=np.int64)  # starts empty

    def _refill(self, i):
        # Keep the unread tail so consumption is exactly sequential.
        rem = self.size - self._pos[i]
        if rem > 0:
            self._buf[i, :rem] = self._buf[i, self._pos[i]:]
        self._buf[i, rem:] = self._gens[i].random(self.size - rem)
        self._pos[i] = 0

    def take(self, idx, k=1):
        """Next k uniforms from each stream in idx; shape (len(idx), k)."""
        idx = np.asarray(idx, dtype=np.int64)
        low = idx[self._pos[idx] + k > self.size]
        for i in low:
            self._refill(i)
        pos = self._pos[idx]
        out = self._buf[idx[:, None], pos[:, None] + np.arange(k)]
        self._pos[idx] += k
        return out

    def put_back(self, i, k):
        """Return the last k values taken from stream i to the buffer.

        Only valid up to the size of the immediately preceding take (the
        buffer never discards values ahead of the cursor).
        """
        if k > self._pos[i]:
            raise ValueError("cannot put back past the current buffer start")
        self._pos[i] -= k

    def standard_normal(self, idx):
        """One N(0,1) draw per stream in idx via Box-Muller (2 uniforms each)."""
        u = self.take(idx, 2)
        # 1-u keeps the log argument in (0, 1]
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])


def _poisson_inversion(mean, supply, idx):
    """Sequential-search inversion; consumes exactly one uniform per variate.

    All lanes share the iteration counter, so the still-searching set only
    shrinks; tail mass beyond the iteration cap is < 1e-15 for mean < 10.
    """
    u = supply.take(idx, 1)[:, 0]
    x = np.zeros(mean.shape, dtype=np.int64)
    p = np.exp(-mean)
    s = p.copy()
    rem = np.flatnonzero(u > s)
    k = 0
    while rem.size and k < 160:
        k += 1
        pk = p[rem] * (mean[rem] / k)
        sk = s[rem] + pk
        p[rem] = pk
        s[rem] = sk
        x[rem] = k
        rem = rem[u[rem] > sk]
    return x


def _poisson_ptrs(mean, supply, idx):
    """Hormann's transformed-rejection sampler for mean >= 10."""
    n = mean.shape[0]
    out = np.zeros(n, dtype=np.int64)
    b = 0.931 + 2.53 * np.sqrt(mean)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    v_r = 0.9277 - 3.6224 / (b - 2.0)
    log_mean = np.log(mean)
    sel = np.arange(n)
    while sel.size:
        uv = supply.take(idx[sel], 2)
        u = uv[:, 0] - 0.5
        v = uv[:, 1]
        us = 0.5 - np.abs(u)
        k = np.floor((2.0 * a[sel] / us + b[sel]) * u + mean[sel] + 0.43)
        accept = (us >= 0.07) & (v <= v_r[sel])
        slow = ~(accept | (k < 0) | ((us < 0.013) & (v > us)))
        if slow.any():
            ss = sel[slow]
            lhs = np.log(v[slow] * inv_alpha[ss] / (a[ss] / us[slow] ** 2 + b[ss]))
            rhs = k[slow] * log_mean[ss] - mean[ss] - gammaln(k[slow] + 1.0)
            accept[slow] = lhs <= rhs
        out[sel[accept]] = k[accept].astype(np.int64)
        sel = sel[~accept]
    return out


def poisson_counts(means, supply, idx):
    """Poisson draws with per-stream means, one variate per column.

    means has shape (len(idx), K); variates are drawn sensor-by-sensor so each
    stream's consumption order is (sensor 0, sensor 1, ...) regardless of the
    batch around it.  Inversion below POISSON_INVERSION_CUTOFF, PTRS above.
    """
    means = np.asarray(means, dtype=float)
    idx = np.asarray(idx, dtype=np.int64)
    n, k_cols = means.shape
    out = np.zeros((n, k_cols), dtype=np.int64)
    for j in range(k_cols):
        mu = means[:, j]
        small = mu < POISSON_INVERSION_CUTOFF
        if small.any():
            s = np.flatnonzero(small)
            out[s, j] = _poisson_inversion(mu[s], supply, idx[s])
        if (~small).any():
            l = np.flatnonzero(~small)
            out[l, j] = _poisson_ptrs(mu[l], supply, idx[l])
    return out
