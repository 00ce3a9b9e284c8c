"""Feedforward and recurrent building blocks."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    _sigmoid_np,
    concat,
    forward_affine,
    mul,
    sigmoid,
    tanh,
)


def uniform_init(rng: np.random.Generator, out_dim: int, in_dim: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(in_dim)
    W = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = rng.uniform(-bound, bound, size=out_dim)
    return W, b


class Module:
    """Anything that owns named parameter tensors."""

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class MLP(Module):
    """Stack of affine layers; ``activations`` has one entry per layer."""

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator, prefix: str = ""):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.prefix = prefix
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            W, b = uniform_init(rng, n_out, n_in)
            self.weights.append(Tensor(W, requires_grad=True, name=f"{prefix}l{i}.W"))
            self.biases.append(Tensor(b, requires_grad=True, name=f"{prefix}l{i}.b"))

    def named_parameters(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [(W.name, W), (b.name, b)]
        return out

    def __call__(self, x) -> Tensor:
        h = x
        for W, b, act in zip(self.weights, self.biases, self.activations):
            h = forward_affine(h, W, b, act)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass; never touches a tape."""
        h = np.asarray(x, dtype=np.float64)
        for W, b, act in zip(self.weights, self.biases, self.activations):
            h = h @ W.data.T + b.data
            if act == "relu":
                h = np.maximum(h, 0.0)
            elif act == "tanh":
                h = np.tanh(h)
            elif act == "sigmoid":
                h = _sigmoid_np(h)
        return h


class GRUCell(Module):
    """Gated recurrent cell.

    r = σ(Wx_r x + Wh_r h + b_r), u = σ(Wx_u x + Wh_u h + b_u),
    n = tanh(Wx_n x + r ⊙ (Wh_n h) + b_n), h' = (1 − u) ⊙ n + u ⊙ h.
    """

    kind = "gru"

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, prefix: str = ""):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.state_size = hidden_size
        H = hidden_size
        Wx, b = uniform_init(rng, 3 * H, input_size)
        Wh, _ = uniform_init(rng, 3 * H, H)
        self.Wx = Tensor(Wx, requires_grad=True, name=f"{prefix}Wx")
        self.Wh = Tensor(Wh, requires_grad=True, name=f"{prefix}Wh")
        self.b = Tensor(b, requires_grad=True, name=f"{prefix}b")
        self._zero_bias = np.zeros(3 * H)

    def named_parameters(self):
        return [(self.Wx.name, self.Wx), (self.Wh.name, self.Wh), (self.b.name, self.b)]

    def __call__(self, h_prev, inputs: Sequence) -> Tensor:
        return recurrent_step(h_prev, inputs, self)

    def step(self, h_prev: Tensor, x: Tensor) -> Tensor:
        H = self.hidden_size
        gx = forward_affine(x, self.Wx, self.b)
        gh = forward_affine(h_prev, self.Wh, self._zero_bias)
        r = sigmoid(gx[..., :H] + gh[..., :H])
        u = sigmoid(gx[..., H : 2 * H] + gh[..., H : 2 * H])
        n = tanh(gx[..., 2 * H :] + mul(r, gh[..., 2 * H :]))
        return n + mul(u, h_prev - n)

    def step_numpy(self, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
        H = self.hidden_size
        gx = x @ self.Wx.data.T + self.b.data
        gh = h_prev @ self.Wh.data.T
        r = _sigmoid_np(gx[..., :H] + gh[..., :H])
        u = _sigmoid_np(gx[..., H : 2 * H] + gh[..., H : 2 * H])
        n = np.tanh(gx[..., 2 * H :] + r * gh[..., 2 * H :])
        return n + u * (h_prev - n)


class LSTMCell(Module):
    """LSTM cell whose recurrent state packs ``[h, c]`` into one vector."""

    kind = "lstm"

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, prefix: str = ""):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.state_size = 2 * hidden_size
        H = hidden_size
        W, b = uniform_init(rng, 4 * H, input_size + H)
        self.W = Tensor(W, requires_grad=True, name=f"{prefix}W")
        self.b = Tensor(b, requires_grad=True, name=f"{prefix}b")

    def named_parameters(self):
        return [(self.W.name, self.W), (self.b.name, self.b)]

    def __call__(self, h_prev, inputs: Sequence) -> Tensor:
        return recurrent_step(h_prev, inputs, self)

    def step(self, state: Tensor, x: Tensor) -> Tensor:
        H = self.hidden_size
        h, c = state[..., :H], state[..., H:]
        z = forward_affine(concat([x, h]), self.W, self.b)
        i = sigmoid(z[..., :H])
        f = sigmoid(z[..., H : 2 * H])
        o = sigmoid(z[..., 2 * H : 3 * H])
        g = tanh(z[..., 3 * H :])
        c_new = mul(f, c) + mul(i, g)
        return concat([mul(o, tanh(c_new)), c_new])

    def step_numpy(self, state: np.ndarray, x: np.ndarray) -> np.ndarray:
        H = self.hidden_size
        h, c = state[..., :H], state[..., H:]
        z = np.concatenate([x, h], axis=-1) @ self.W.data.T + self.b.data
        i, f, o = (_sigmoid_np(z[..., k * H : (k + 1) * H]) for k in range(3))
        c_new = f * c + i * np.tanh(z[..., 3 * H :])
        return np.concatenate([o * np.tanh(c_new), c_new], axis=-1)


CELLS = {"gru": GRUCell, "lstm": LSTMCell}


def make_cell(kind: str, input_size: int, hidden_size: int, rng: np.random.Generator, prefix: str = "") -> Module:
    try:
        return CELLS[kind](input_size, hidden_size, rng, prefix)
    except KeyError:
        raise ValueError(f"unknown recurrent cell {kind!r}; choose from {sorted(CELLS)}") from None


def recurrent_step(h_prev, inputs: Sequence, cell) -> Tensor:
    """Advance ``cell`` one step from ``h_prev`` on the concatenated ``inputs``."""
    h_prev = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
    x = concat(inputs) if len(inputs) > 1 else inputs[0]
    x = x if isinstance(x, Tensor) else Tensor(x)
    if h_prev.shape[-1] != cell.state_size:
        raise DimensionError(f"hidden width {h_prev.shape[-1]} != cell state width {cell.state_size}")
    if x.shape[-1] != cell.input_size:
        raise DimensionError(f"input width {x.shape[-1]} != cell input width {cell.input_size}")
    return cell.step(h_prev, x)
