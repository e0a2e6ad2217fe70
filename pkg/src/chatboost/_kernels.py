"""Compiled inner loops of the tree grower."""
import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TO_UNIT = 1.0 / 9007199254740992.0  # 2**-53
# Box-Muller with u1 >= 2**-54 never exceeds sqrt(-2 ln 2**-54) < 8.66
NOISE_BOUND = 8.7


@njit(cache=True)
def _splitmix(x):
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def candidate_noise(seed, feature, position):
    """Standard normal draw that depends only on (seed, feature, position)."""
    key = _splitmix(np.uint64(seed) ^ _splitmix(np.uint64(feature) * _GOLDEN + np.uint64(position)))
    b = _splitmix(key)
    u1 = (float(key >> np.uint64(11)) + 0.5) * _TO_UNIT
    u2 = float(b >> np.uint64(11)) * _TO_UNIT
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@njit(cache=True)
def scan_numeric(XT, sorted_rows, g, h, l2, min_leaf, noise_std, noise_seed):
    """Best cut over all features of one node.

    ``sorted_rows[f]`` lists the node's rows ordered by feature ``f``; cut ``i``
    sends the first ``i + 1`` rows left. Only cuts between distinct values with
    positive gain compete; with ``noise_std > 0`` each competing cut's score
    gets ``noise_std * candidate_noise(noise_seed, f, i)``. Returns
    (feature, cut, noiseless gain, score), feature -1 when nothing gains.
    """
    F, n = sorted_rows.shape
    G = 0.0
    H = 0.0
    for i in range(n):
        r = sorted_rows[0, i]
        G += g[r]
        H += h[r]
    parent = G * G / (H + l2) if H + l2 > 0 else 0.0
    slack = NOISE_BOUND * noise_std
    best_f = -1
    best_i = -1
    best_gain = 0.0
    best_score = -np.inf
    for f in range(F):
        GL = 0.0
        HL = 0.0
        for i in range(n - 1):
            r = sorted_rows[f, i]
            GL += g[r]
            HL += h[r]
            if i + 1 < min_leaf or n - i - 1 < min_leaf:
                continue
            if not XT[f, sorted_rows[f, i + 1]] > XT[f, r]:
                continue
            dl = HL + l2
            dr = H - HL + l2
            left = GL * GL / dl if dl > 0 else 0.0
            right = (G - GL) * (G - GL) / dr if dr > 0 else 0.0
            gain = left + right - parent
            if not gain > 0 or gain + slack < best_score:
                continue
            score = gain
            if noise_std > 0:
                score += noise_std * candidate_noise(noise_seed, f, i)
            if score > best_score:
                best_score = score
                best_gain = gain
                best_f = f
                best_i = i
    return best_f, best_i, best_gain, best_score


@njit(cache=True)
def partition_sorted(sorted_rows, in_left, n_left):
    """Stable split of every feature's row order into left and right parts."""
    F, n = sorted_rows.shape
    left = np.empty((F, n_left), dtype=sorted_rows.dtype)
    right = np.empty((F, n - n_left), dtype=sorted_rows.dtype)
    for f in range(F):
        a = 0
        b = 0
        for i in range(n):
            r = sorted_rows[f, i]
            if in_left[r]:
                left[f, a] = r
                a += 1
            else:
                right[f, b] = r
                b += 1
    return left, right
