"""Potential scale reduction for multi-chain MCMC output."""

import numpy as np
from scipy import stats


def _rhat(chains):
    chains = np.asarray(chains, dtype=float)
    m, n = chains.shape
    if n < 2:
        return np.nan
    W = chains.var(axis=1, ddof=1).mean()
    B = n * chains.mean(axis=1).var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else np.inf
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _split(chains):
    chains = np.asarray(chains, dtype=float)
    n = chains.shape[1] // 2
    return np.vstack([chains[:, :n], chains[:, chains.shape[1] - n:]])


def split_rhat(chains) -> float:
    """Classic split-R-hat of an (n_chains, n_draws) array."""
    return _rhat(_split(chains))


def rank_normalized_split_rhat(chains) -> float:
    """Rank-normalized split-R-hat (bulk).

    Draws are replaced by normal scores of their pooled ranks before the
    split-R-hat computation, which makes the statistic insensitive to heavy
    tails in variance parameters.
    """
    s = _split(chains)
    if np.ptp(s) == 0:
        return 1.0
    r = stats.rankdata(s, method="average").reshape(s.shape)
    z = stats.norm.ppf((r - 3.0 / 8.0) / (s.size + 0.25))
    return _rhat(z)


def rhat_table(draws, names) -> dict:
    """Map name -> rank-normalized split-R-hat for draws shaped (chains, n, p)."""
    draws = np.asarray(draws, dtype=float)
    return {name: rank_normalized_split_rhat(draws[:, :, k]) for k, name in enumerate(names)}


def effective_sample_size(x) -> float:
    """Single-chain ESS from the initial positive sequence of autocorrelations."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    acf /= acf[0]
    tau = 1.0
    for k in range(1, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair < 0:
            break
        tau += 2.0 * pair
    return float(n / tau)
