import numpy as np

from daif.model import Layout


def random_obs(layout: Layout, n: int, rng) -> np.ndarray:
    """Well-formed random observations: one-hot groups and uniform preference channels."""
    o = np.zeros((n, layout.dim))
    for g in layout.groups:
        idx = rng.integers(0, g.stop - g.start, size=n)
        o[np.arange(n), g.start + idx] = 1.0
    o[:, layout.prefs] = rng.random((n, 3))
    return o
