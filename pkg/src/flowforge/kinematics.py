"""Trajectory measurements shared by the scorers and the caption estimator."""

import numpy as np

RISE_TOL = 0.02
# upward acceleration beyond this marks the floor impulse
IMPULSE_TOL = 0.02


def present_at_start(states, a_min):
    return np.flatnonzero(states[0, :, 3] >= a_min)


def displacement_pairs(states, a_min):
    """Per-frame displacement vectors of objects present in both frames.

    Returns ``(vectors, mask)`` with ``vectors`` of shape ``(T-1, K, 2)`` and a
    boolean ``mask`` marking the pairs that count.
    """
    pres = states[:, :, 3] >= a_min
    mask = pres[:-1] & pres[1:]
    return states[1:, :, :2] - states[:-1, :, :2], mask


def prebounce_window(y, r=None):
    """Indices ``i`` of pure pre-bounce second differences ``y[i+1]-2y[i]+y[i-1]``.

    Gravity alone never produces upward acceleration, so the descent ends at
    the first second difference above ``IMPULSE_TOL`` (the floor impulse). A rise larger
    than ``RISE_TOL`` at ``i`` means frame ``i`` itself may be past the floor,
    so the triple centred at ``i-1`` is dropped as well. With the radius ``r``
    known, a triple is also dropped when extrapolating the descent so far puts
    frame ``i+1`` below the floor (a bounce hidden inside one frame step).
    """
    T = len(y)
    acc = 0.0
    for i in range(1, T - 1):
        if y[i + 1] - y[i] > RISE_TOL:
            return np.arange(1, max(1, i - 1))
        d2 = y[i + 1] - 2.0 * y[i] + y[i - 1]
        if d2 > IMPULSE_TOL:
            return np.arange(1, i)
        if r is not None and i > 1:
            g_run = -acc / (i - 1)
            if 2.0 * y[i] - y[i - 1] - g_run < r - 1e-12:
                return np.arange(1, i)
        acc += d2
    return np.arange(1, T - 1)


def second_diffs(y):
    return y[2:] - 2.0 * y[1:-1] + y[:-2]


def gravity_estimate(states, a_min):
    """(g_hat, n_frames, spread) for object slot 0, or None if it is absent."""
    pres = states[:, 0, 3] >= a_min
    if not pres[0]:
        return None
    stop = len(pres) if pres.all() else int(np.argmin(pres))
    y = states[:stop, 0, 1]
    if len(y) < 3:
        return 0.0, 0, 0.0
    idx = prebounce_window(y, states[0, 0, 2])
    if idx.size == 0:
        return 0.0, 0, 0.0
    d2 = second_diffs(y)[idx - 1]
    return float(np.mean(-d2)), int(idx.size), float(d2.max() - d2.min())
