"""Scalar activations with their first two derivatives."""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

SWISH_BETA = 0.1


@dataclass(frozen=True)
class Activation:
    kind: str
    f: Callable
    d1: Callable
    d2: Callable
    smooth: bool = True

    def __call__(self, z):
        return self.f(z)


def _tanh_d1(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _tanh_d2(z):
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


def _sig_d1(z):
    s = expit(z)
    return s * (1.0 - s)


def _sig_d2(z):
    s = expit(z)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def _swish(z):
    return z * expit(SWISH_BETA * z)


def _swish_d1(z):
    s = expit(SWISH_BETA * z)
    return s + SWISH_BETA * z * s * (1.0 - s)


def _swish_d2(z):
    s = expit(SWISH_BETA * z)
    return SWISH_BETA * s * (1.0 - s) * (2.0 + SWISH_BETA * z * (1.0 - 2.0 * s))


ACTIVATIONS = {
    "tanh": Activation("tanh", np.tanh, _tanh_d1, _tanh_d2),
    "sigmoid": Activation("sigmoid", expit, _sig_d1, _sig_d2),
    # subgradient convention relu'(0) = 0
    "relu": Activation(
        "relu",
        lambda z: np.maximum(z, 0.0),
        lambda z: (z > 0).astype(float),
        np.zeros_like,
        smooth=False,
    ),
    "quadratic": Activation("quadratic", lambda z: 0.5 * z * z, lambda z: np.array(z, dtype=float), np.ones_like),
    "identity": Activation("identity", lambda z: np.array(z, dtype=float), np.ones_like, np.zeros_like),
    "swish": Activation("swish", _swish, _swish_d1, _swish_d2),
}

HEADS = ("linear", "softmax") + tuple(k for k in ACTIVATIONS if k not in ("identity", "relu"))


def get(kind):
    try:
        return ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None
