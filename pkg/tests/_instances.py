"""Random moment instances shared by solver tests."""

import numpy as np

from koopwatch.koopman import Moments, moments_from_lifted


def random_moments(rng, D, M=None):
    """Moments from a random lifted trajectory; G is nonsingular when M > D."""
    M = M or 4 * D
    psi = rng.standard_normal((M + 1, D))
    return moments_from_lifted(psi)


def scalar_moments(A, G):
    return Moments(np.array([[A]], float), np.array([[G]], float), 1)
