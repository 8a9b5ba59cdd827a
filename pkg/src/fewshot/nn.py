"""Small trainable building blocks on top of the autodiff tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, elu, matmul


class Linear:
    """Affine map x @ W + b with LeCun-style initialization.

    ``w_scale`` overrides the default 1/sqrt(fan_in) weight standard
    deviation; near-zero scales are used where a module should start close
    to an identity/neutral behavior without going exactly dead.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 w_scale: float | None = None):
        std = w_scale if w_scale is not None else 1.0 / np.sqrt(n_in)
        self.w = Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def parameters(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class MLP:
    """Stack of Linear layers with ELU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 last_scale: float | None = None):
        self.layers = []
        for i in range(len(dims) - 1):
            scale = last_scale if i == len(dims) - 2 else None
            self.layers.append(Linear(dims[i], dims[i + 1], rng, w_scale=scale))

    def __call__(self, x: Tensor) -> Tensor:
        out = x
        for i, layer in enumerate(self.layers):
            out = layer(out)
            if i < len(self.layers) - 1:
                out = elu(out)
        return out

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for key, value in layer.parameters().items():
                out[f"fc{i}/{key}"] = value
        return out


def prefix_params(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}/{k}": v for k, v in params.items()}
