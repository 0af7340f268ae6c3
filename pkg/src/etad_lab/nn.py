"""Parameter initialisation and the few layer helpers shared by encoder and detector."""

import numpy as np

from .autodiff import Tensor, matmul


def uniform_param(rng, fan_in, shape, name):
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), param=True, name=name)


def zeros_param(shape, name):
    return Tensor(np.zeros(shape), param=True, name=name)


def ones_param(shape, name):
    return Tensor(np.ones(shape), param=True, name=name)


def linear(x, w, b, kernel="blas"):
    return matmul(x, w, kernel=kernel) + b


def seeded_rng(seed, *stream):
    """Independent generator for a named stream; names are hashed stably."""
    words = [int(seed)]
    for part in stream:
        if isinstance(part, str):
            words.extend(part.encode())
        else:
            words.append(int(part))
    return np.random.default_rng(np.random.SeedSequence(words))
