"""Neural building blocks on top of the autodiff engine: MLP and GRU cell."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Mlp:
    """Dense feed-forward net; relu hidden layers, configurable output activation."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, out_act: str = "none"):
        if out_act not in ("none", "sigmoid"):
            raise ValueError(f"unknown output activation {out_act!r}")
        self.out_act = out_act
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        for d_in, d_out in zip(sizes, sizes[1:]):
            self.weights.append(Parameter(uniform_init(rng, d_in, (d_in, d_out))))
            self.biases.append(Parameter(uniform_init(rng, d_in, (1, d_out))))

    def forward(self, x: Tensor, frozen: bool = False) -> Tensor:
        """Run the net; with frozen=True the weights are treated as constants
        (gradient flows through x only)."""
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if frozen:
                w, b = ad.constant(w.data), ad.constant(b.data)
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
            elif self.out_act == "sigmoid":
                h = ad.sigmoid(h)
        return h

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


class GruCell:
    """Single-layer GRU. Update rule: h' = (1 - z) * candidate + z * h."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_hidden = d_hidden

        def w(fan, shape):
            return Parameter(uniform_init(rng, fan, shape))

        self.wz, self.uz, self.bz = w(d_in, (d_in, d_hidden)), w(d_hidden, (d_hidden, d_hidden)), w(d_in, (1, d_hidden))
        self.wr, self.ur, self.br = w(d_in, (d_in, d_hidden)), w(d_hidden, (d_hidden, d_hidden)), w(d_in, (1, d_hidden))
        self.wh, self.uh, self.bh = w(d_in, (d_in, d_hidden)), w(d_hidden, (d_hidden, d_hidden)), w(d_in, (1, d_hidden))

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, self.wz), ad.matmul(h, self.uz)), self.bz))
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, self.wr), ad.matmul(h, self.ur)), self.br))
        cand = ad.tanh(ad.add(ad.add(ad.matmul(x, self.wh), ad.matmul(ad.mul(r, h), self.uh)), self.bh))
        one_minus_z = ad.add_scalar(ad.neg(z), 1.0)
        return ad.add(ad.mul(one_minus_z, cand), ad.mul(z, h))

    def run(self, xs: Tensor) -> Tensor:
        """Feed rows of xs in order from a zero initial state; return final state."""
        h = ad.constant(np.zeros((1, self.d_hidden)))
        for t in range(xs.data.shape[0]):
            h = self.step(ad.slice_rows(xs, t, t + 1), h)
        return h

    def parameters(self) -> list[Parameter]:
        return [self.wz, self.uz, self.bz, self.wr, self.ur, self.br,
                self.wh, self.uh, self.bh]
