"""The small color decoder: feature + encoded view direction -> RGB."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIDDEN = 128
N_FREQS = 2
DIR_ENC_DIM = 3 + 3 * 2 * N_FREQS


def encode_direction(d):
    """Raw direction followed by sin/cos at frequencies 1 and 2."""
    d = np.asarray(d)
    parts = [d]
    for k in range(N_FREQS):
        parts.append(np.sin(d * 2.0**k))
        parts.append(np.cos(d * 2.0**k))
    return np.concatenate(parts, axis=-1)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class DecoderMLP:
    """Two ReLU hidden layers of width 128, logistic output.

    Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    LAYERS = ("W1", "b1", "W2", "b2", "W3", "b3")

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[0] - DIR_ENC_DIM

    @classmethod
    def shapes(cls, P: int):
        d_in = P + DIR_ENC_DIM
        return {
            "W1": (d_in, HIDDEN), "b1": (HIDDEN,),
            "W2": (HIDDEN, HIDDEN), "b2": (HIDDEN,),
            "W3": (HIDDEN, 3), "b3": (3,),
        }

    @classmethod
    def zeros(cls, P: int, dtype=np.float32) -> "DecoderMLP":
        return cls(**{k: np.zeros(s, dtype=dtype) for k, s in cls.shapes(P).items()})

    @classmethod
    def init(cls, P: int, rng: np.random.Generator, dtype=np.float32) -> "DecoderMLP":
        arrays = {}
        for name, shape in cls.shapes(P).items():
            fan_in = shape[0] if name.startswith("W") else arrays["W" + name[1:]].shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(**arrays)

    def parameters(self) -> dict:
        return {k: getattr(self, k) for k in self.LAYERS}

    def copy(self) -> "DecoderMLP":
        return DecoderMLP(**{k: v.copy() for k, v in self.parameters().items()})

    def astype(self, dtype) -> "DecoderMLP":
        return DecoderMLP(**{k: v.astype(dtype) for k, v in self.parameters().items()})

    def forward(self, feature, dir_enc, cache=False):
        x = np.concatenate([feature, dir_enc], axis=-1)
        z1 = x @ self.W1 + self.b1
        h1 = np.maximum(z1, 0)
        z2 = h1 @ self.W2 + self.b2
        h2 = np.maximum(z2, 0)
        c = sigmoid(h2 @ self.W3 + self.b3)
        if cache:
            return c, (x, z1, h1, z2, h2, c)
        return c

    def backward(self, g_color, cache):
        """Gradients of the parameters and of the feature input."""
        x, z1, h1, z2, h2, c = cache
        g3 = g_color * c * (1.0 - c)
        grads = {"W3": h2.T @ g3, "b3": g3.sum(axis=0)}
        g = (g3 @ self.W3.T) * (z2 > 0)
        grads["W2"] = h1.T @ g
        grads["b2"] = g.sum(axis=0)
        g = (g @ self.W2.T) * (z1 > 0)
        grads["W1"] = x.T @ g
        grads["b1"] = g.sum(axis=0)
        g_feature = g @ self.W1[: self.feature_dim].T
        return grads, g_feature

    def lipschitz_bound(self) -> float:
        """Upper bound on the input-to-output Lipschitz constant."""
        norms = [np.linalg.norm(w.astype(np.float64), 2) for w in (self.W1, self.W2, self.W3)]
        return 0.25 * float(np.prod(norms))


def decode_color(feature, direction, decoder: DecoderMLP):
    """c = S(feature, d) for one or many samples."""
    feature = np.asarray(feature)
    direction = np.asarray(direction)
    single = feature.ndim == 1
    f = np.atleast_2d(feature)
    d = np.broadcast_to(np.atleast_2d(direction), (f.shape[0], 3))
    c = decoder.forward(f, encode_direction(d).astype(f.dtype, copy=False))
    return c[0] if single else c
