"""Multi-layer perceptron building blocks on top of the tensor engine.

Parameters live in a flat, name-keyed :class:`ParameterStore` rather than in
layer objects. That keeps serialization, optimizer state, and parameter
accounting trivial: everything is a (name, array) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError, ShapeError
from . import tensor as T

_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh}


@dataclass(frozen=True)
class MlpSpec:
    """Shape of one feed-forward block.

    ``hidden_dims=()`` degenerates to a single affine map, which is how
    linear scoring heads are expressed. ``seed`` only matters when a block
    is initialized standalone; composite models derive per-block streams
    from their own seed instead.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    output_dim: int = 1
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ConfigError(f"all layer widths must be positive, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims)


class ParameterStore:
    """Insertion-ordered mapping from parameter name to trainable tensor."""

    def __init__(self):
        self._params: dict[str, T.Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> T.Tensor:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} already registered")
        t = T.Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> T.Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    @property
    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def clear_grads(self) -> None:
        for t in self._params.values():
            t.clear_grad()

    def subset(self, prefix: str) -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]


def init_mlp_params(store: ParameterStore, prefix: str, spec: MlpSpec,
                    rng: np.random.Generator | None = None) -> None:
    """Register Glorot-uniform weights and zero biases for one block.

    Names follow ``{prefix}.w{i}`` / ``{prefix}.b{i}`` with layer index i
    starting at 0. Draw order is fixed by layer order, so one seeded
    generator reproduces the whole model bit for bit.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{prefix}.w{i}", rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def forward_mlp(store: ParameterStore, prefix: str, spec: MlpSpec,
                x: T.Tensor) -> T.Tensor:
    """Apply the block to a [rows, input_dim] matrix.

    The activation sits between layers only; the final layer is affine so
    heads can emit unbounded logits.
    """
    if x.values.ndim != 2:
        raise ShapeError(f"{prefix}: expected a rank-2 input, got shape {x.shape}")
    act = _ACTIVATIONS[spec.activation]
    n_layers = len(spec.layer_dims)
    h = x
    for i, (fan_in, _) in enumerate(spec.layer_dims):
        if h.shape[1] != fan_in:
            raise ShapeError(
                f"{prefix}: layer {i} expects width {fan_in}, got {h.shape[1]}")
        w = store[f"{prefix}.w{i}"]
        b = store[f"{prefix}.b{i}"]
        h = T.add_bias(T.matmul(h, w), b)
        if i < n_layers - 1:
            h = act(h)
    return h


@dataclass
class GradReport:
    """Summary of which parameters received nonzero gradient in a step."""

    touched: list[str] = field(default_factory=list)
    silent: list[str] = field(default_factory=list)


def grad_report(store: ParameterStore) -> GradReport:
    report = GradReport()
    for name, t in store.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient buffer")
        if np.any(t.grad != 0.0):
            report.touched.append(name)
        else:
            report.silent.append(name)
    return report
