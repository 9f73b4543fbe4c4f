"""Minimal layer graph: parameters, modules with explicit backward, containers."""

from typing import Callable, Dict, Iterator, List, Tuple

import numpy as np


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(shape={self.data.shape})"


class Module:
    """Base layer.

    ``forward`` caches what ``backward`` needs; ``backward`` receives the
    upstream gradient, accumulates into parameter ``.grad`` buffers and
    returns the gradient with respect to the input. Non-learned state that
    must survive a checkpoint is listed in ``_buffer_names``.
    """

    _buffer_names: Tuple[str, ...] = ()

    def __init__(self):
        self.training = True
        self._hooks: List[Callable] = []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x):
        out = self.forward(x)
        for hook in self._hooks:
            hook(self, x, out)
        return out

    def register_hook(self, fn: Callable) -> Callable:
        """``fn(module, input, output)`` runs after every forward call."""
        self._hooks.append(fn)
        return fn

    def remove_hook(self, fn: Callable):
        self._hooks.remove(fn)

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> Iterator["Module"]:
        for _, m in self.named_modules():
            yield m

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, m in self.named_modules(prefix):
            for b in m._buffer_names:
                yield (f"{name}.{b}" if name else b), getattr(m, b)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, copy=True)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        expected = set(params) | {n for n, _ in self.named_buffers()}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            p.data[...] = state[name]
        for name, m in self.named_modules():
            for b in m._buffer_names:
                key = f"{name}.{b}" if name else b
                getattr(m, b)[...] = state[key]


class Identity(Module):
    def forward(self, x):
        return x

    def backward(self, grad):
        return grad


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]
