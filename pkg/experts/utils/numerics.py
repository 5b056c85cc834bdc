"""
Scalar and vector primitives shared by the model, the policies and calibration.

Everything here is a pure function of its inputs. Ties are always broken
towards the lower index so rankings are identical on every platform.
"""
import math

import numpy as np

from experts.exceptions import InvalidArgument


def as_scores(values, name='scores'):
    """Return ``values`` as a 1-D float64 array, rejecting NaN and +inf."""
    scores = np.asarray(values, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise InvalidArgument(f'{name} must be a non-empty vector')
    if np.isnan(scores).any() or np.isposinf(scores).any():
        raise InvalidArgument(f'{name} must be finite')
    return scores


def softmax(logits):
    """Exp-normalise ``logits`` with max-subtraction.

    ``-inf`` entries (a pruned expert) get probability 0; at least one
    entry has to be finite.
    """
    logits = as_scores(logits, 'logits')
    peak = logits.max()
    if not np.isfinite(peak):
        raise InvalidArgument('logits need at least one finite entry')
    shifted = np.exp(logits - peak)
    return shifted / shifted.sum()


def descending_order(scores):
    """All indices sorted by descending score, lower index first on ties."""
    return np.argsort(-as_scores(scores), kind='stable')


def topk(scores, k):
    scores = as_scores(scores)
    if not 1 <= k <= scores.size:
        raise InvalidArgument(f'k={k} out of range 1..{scores.size}')
    return np.argsort(-scores, kind='stable')[:k]


def restricted_kl(p, q, n):
    """KL(p' || q') over the top-``n`` outcomes of ``p``, in nats.

    Both distributions are renormalised over that index set. If ``q'`` has no
    mass where ``p'`` does the divergence is ``math.inf``.
    """
    p = as_scores(p, 'p')
    q = as_scores(q, 'q')
    if p.size != q.size:
        raise InvalidArgument('p and q must have the same length')
    if (p < 0).any() or (q < 0).any():
        raise InvalidArgument('distributions must be non-negative')

    index = topk(p, n)
    p_top = p[index]
    q_top = q[index]
    p_mass = p_top.sum()
    q_mass = q_top.sum()
    if p_mass <= 0:
        raise InvalidArgument('p has no mass on its own top-n set')
    if q_mass <= 0:
        return math.inf

    p_top = p_top / p_mass
    q_top = q_top / q_mass
    support = p_top > 0
    if (q_top[support] == 0).any():
        return math.inf

    divergence = float(np.sum(p_top[support] * np.log(p_top[support] / q_top[support])))
    return max(divergence, 0.0)


def cum_ratio(weights, a, b):
    """Sum of the ``a`` largest weights over the sum of the ``b`` largest."""
    weights = as_scores(weights, 'weights')
    if a > b:
        raise InvalidArgument(f'a={a} must not exceed b={b}')
    if a < 1 or b > weights.size:
        raise InvalidArgument(f'a, b must lie in 1..{weights.size}')
    if (weights < 0).any():
        raise InvalidArgument('weights must be non-negative')

    ordered = np.sort(weights)[::-1]
    denominator = ordered[:b].sum()
    if denominator == 0:
        return 1.0
    return float(ordered[:a].sum() / denominator)


def round_half_away(value):
    """Round to the nearest integer, .5 going away from zero."""
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def lower_median(values):
    """Exact median; the lower of the two middle values for even counts."""
    ordered = sorted(values)
    if not ordered:
        raise InvalidArgument('median of an empty sample')
    return ordered[(len(ordered) - 1) // 2]


def population_std(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def softmax_rows(matrix):
    """Row-wise stable softmax of a 2-D array."""
    matrix = np.asarray(matrix, dtype=np.float64)
    shifted = np.exp(matrix - matrix.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)
