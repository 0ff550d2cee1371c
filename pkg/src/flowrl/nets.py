"""Flat parameter vectors with named slices, and small MLPs over them.

All trainable state lives in one flat float64 vector; sub-networks address
their parameters through a named (offset, length) layout. Forward code is
polymorphic: pass a raw numpy slice for sampling, or a Tensor slice of the
same vector when gradients are needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Tensor, tanh


class ConfigError(ValueError):
    """Shape or configuration mismatch."""


ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus a per-layer activation ('tanh' or 'identity')."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigError("MlpSpec needs at least one layer (two widths)")
        if any(w <= 0 for w in self.widths):
            raise ConfigError("layer widths must be positive")
        if len(self.activations) != len(self.widths) - 1:
            raise ConfigError("one activation per layer required")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ConfigError(f"activations must be in {ACTIVATIONS}")

    @property
    def param_count(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.widths[:-1], self.widths[1:]))


def mlp(widths, hidden="tanh", out="identity") -> MlpSpec:
    """Convenience constructor: tanh hidden layers, identity output."""
    widths = tuple(int(w) for w in widths)
    acts = tuple([hidden] * (len(widths) - 2) + [out])
    return MlpSpec(widths, acts)


@dataclass
class ParamVector:
    """Flat parameter storage with disjoint named slices covering it."""

    values: np.ndarray
    layout: dict[str, tuple[int, int]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigError("ParamVector values must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("ParamVector values must be finite")
        spans = sorted(self.layout.values())
        cursor = 0
        for off, length in spans:
            if off != cursor or length < 0:
                raise ConfigError("layout slices must be disjoint and cover the vector")
            cursor += length
        if cursor != self.values.size:
            raise ConfigError("layout does not cover the full vector")

    def slice_of(self, name: str, source=None):
        """The named sub-vector, from `source` (Tensor or array) if given."""
        off, length = self.layout[name]
        src = self.values if source is None else source
        return src[off:off + length]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), dict(self.layout))


class LayoutBuilder:
    """Allocates named contiguous slices; finalize() yields the ParamVector."""

    def __init__(self):
        self._layout: dict[str, tuple[int, int]] = {}
        self._cursor = 0

    def add(self, name: str, length: int) -> None:
        if name in self._layout:
            raise ConfigError(f"duplicate slice name {name!r}")
        self._layout[name] = (self._cursor, int(length))
        self._cursor += int(length)

    def finalize(self, values: np.ndarray | None = None) -> ParamVector:
        if values is None:
            values = np.zeros(self._cursor, dtype=np.float64)
        return ParamVector(values, dict(self._layout))


def mlp_forward(spec: MlpSpec, params, x):
    """Apply the MLP to `x` (.., in_width); params is the flat slice.

    Accepts Tensor or ndarray for both arguments; output type follows the
    inputs. Pure: repeated calls on the same inputs are bit-identical.
    """
    in_width = spec.widths[0]
    x_dim = x.shape[-1] if hasattr(x, "shape") and len(x.shape) > 0 else 1
    if x_dim != in_width:
        raise ConfigError(f"input width {x_dim} != first layer width {in_width}")
    if params.shape[-1] != spec.param_count:
        raise ConfigError(
            f"parameter slice length {params.shape[-1]} != {spec.param_count}")
    h = x
    offset = 0
    for w_in, w_out, act in zip(spec.widths[:-1], spec.widths[1:], spec.activations):
        w = params[offset:offset + w_in * w_out].reshape((w_in, w_out))
        offset += w_in * w_out
        b = params[offset:offset + w_out]
        offset += w_out
        h = h @ w + b
        if act == "tanh":
            h = tanh(h)
    return h


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator,
                    scale: float = 1.0, zero_output: bool = False) -> np.ndarray:
    """Scaled-normal weights, zero biases; optionally a zeroed output layer."""
    out = np.zeros(spec.param_count, dtype=np.float64)
    offset = 0
    n_layers = len(spec.widths) - 1
    for i, (w_in, w_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        n_w = w_in * w_out
        if not (zero_output and i == n_layers - 1):
            out[offset:offset + n_w] = rng.standard_normal(n_w) * (scale / np.sqrt(w_in))
        offset += n_w + w_out
    return out
