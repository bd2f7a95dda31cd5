"""Parameter containers and the small layers shared by every block."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, layer_norm, parameter, relu

Params = dict  # dotted name -> Tensor


def init_linear(params: Params, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                gain: float = 1.0, zero: bool = False) -> None:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    w = np.zeros((fan_in, fan_out)) if zero else rng.uniform(-bound, bound, (fan_in, fan_out))
    params[f"{name}.weight"] = parameter(w, f"{name}.weight")
    params[f"{name}.bias"] = parameter(np.zeros(fan_out), f"{name}.bias")


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def init_mlp(params: Params, name: str, dims, rng: np.random.Generator, zero_last: bool = False) -> None:
    """Linear layers ``name.0``, ``name.1``, ... with widths ``dims``."""
    n = len(dims) - 1
    for i in range(n):
        init_linear(params, f"{name}.{i}", dims[i], dims[i + 1], rng, zero=zero_last and i == n - 1)


def mlp(params: Params, name: str, x: Tensor, n_layers: int) -> Tensor:
    """ReLU between layers, none after the last."""
    for i in range(n_layers):
        x = linear(params, f"{name}.{i}", x)
        if i < n_layers - 1:
            x = relu(x)
    return x


def init_layer_norm(params: Params, name: str, dim: int) -> None:
    params[f"{name}.gamma"] = parameter(np.ones(dim), f"{name}.gamma")
    params[f"{name}.beta"] = parameter(np.zeros(dim), f"{name}.beta")


def affine_layer_norm(params: Params, name: str, x: Tensor) -> Tensor:
    return layer_norm(x) * params[f"{name}.gamma"] + params[f"{name}.beta"]


def select(params: Params, prefix: str) -> Params:
    """Sub-dictionary of parameters under ``prefix.``."""
    p = prefix + "."
    return {k: v for k, v in params.items() if k.startswith(p)}
