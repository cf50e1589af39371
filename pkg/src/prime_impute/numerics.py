"""Differentiable-computation substrate.

Dense tensors and reverse-mode gradients come from torch. This module adds
the handful of shape-checked operations the model is written against, a named
parameter store, a global 32/64-bit switch and a central finite-difference
gradient checker.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from typing import Callable, Iterator, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

GELU_FORMS = ("exact", "tanh")
ACTIVATIONS = ("sigmoid", "tanh", "gelu", "relu_max0")


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""


# ---------------------------------------------------------------------------
# precision
# ---------------------------------------------------------------------------


def set_precision(bits: int) -> None:
    """Select 32-bit (production default) or 64-bit (gradient checking) mode."""
    if bits == 32:
        torch.set_default_dtype(torch.float32)
    elif bits == 64:
        torch.set_default_dtype(torch.float64)
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def precision() -> int:
    return 64 if torch.get_default_dtype() == torch.float64 else 32


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def assert_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def apply_linear(weight: Tensor, x: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = W x (+ b)`` over the last axis of ``x``; leading axes are batch axes."""
    if weight.dim() != 2:
        raise DimensionError(f"weight must be 2-D, got shape {tuple(weight.shape)}")
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"cannot apply {tuple(weight.shape)} map to input of width {x.shape[-1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"bias shape {tuple(bias.shape)} does not match output width {weight.shape[0]}"
        )
    return F.linear(x, weight, bias)


def softmax_scaled(
    scores: Tensor, scale: float, dim: int = -1, valid: Tensor | None = None
) -> Tensor:
    """Max-stabilised softmax of ``scores * scale`` along ``dim``.

    ``valid`` (broadcastable boolean) excludes positions from the normaliser;
    excluded positions receive weight 0. At least one position per slice must
    be valid.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    if scores.shape[dim] < 1:
        raise DimensionError("softmax over an empty axis")
    z = scores * scale
    if valid is not None:
        z = z.masked_fill(~valid, -math.inf)
    # torch.softmax subtracts the running maximum before exponentiating
    return torch.softmax(z, dim=dim)


def activation(kind: str, x: Tensor, gelu_form: str = "exact") -> Tensor:
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "tanh":
        return torch.tanh(x)
    if kind == "relu_max0":
        return torch.clamp_min(x, 0.0)
    if kind == "gelu":
        if gelu_form not in GELU_FORMS:
            raise ValueError(f"unknown GELU form {gelu_form!r}")
        return F.gelu(x, approximate="none" if gelu_form == "exact" else "tanh")
    raise ValueError(f"unknown activation {kind!r}")


def linear_weight(n_out: int, n_in: int) -> nn.Parameter:
    """Weight drawn from U(-1/sqrt(n_in), 1/sqrt(n_in)) with the torch global generator."""
    bound = 1.0 / math.sqrt(n_in)
    return nn.Parameter(torch.empty(n_out, n_in).uniform_(-bound, bound))


def linear_bias(n_out: int, n_in: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(n_in)
    return nn.Parameter(torch.empty(n_out).uniform_(-bound, bound))


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


class ParamStore(Mapping[str, nn.Parameter]):
    """Ordered, uniquely named parameters; each parameter's ``.grad`` is its accumulator."""

    def __init__(self, params: Mapping[str, nn.Parameter] | None = None):
        self._params: OrderedDict[str, nn.Parameter] = OrderedDict()
        for name, p in (params or {}).items():
            self.add(name, p)

    @classmethod
    def from_modules(cls, **modules: nn.Module) -> "ParamStore":
        store = cls()
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                store.add(f"{prefix}.{name}", p)
        return store

    def add(self, name: str, param: nn.Parameter) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = param

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def grad(self, name: str) -> Tensor:
        p = self._params[name]
        return p.grad if p.grad is not None else torch.zeros_like(p)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_elements(self) -> int:
        return sum(p.numel() for p in self._params.values())


def check_gradients(
    f: Callable[[], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    names: list[str] | None = None,
    mode: str = "elementwise",
) -> dict[str, float]:
    """Compare back-propagated gradients of ``f`` with central differences.

    ``f`` takes no arguments and reads the parameters in ``store``. Returns one
    relative error per parameter. ``mode="elementwise"`` gives the maximum of
    ``|a - n| / max(|a|, |n|, 1e-8)``; ``mode="norm"`` gives
    ``||a - n|| / max(||a||, ||n||, 1e-8)`` over the whole parameter, which
    stays meaningful when single entries are below the difference noise.
    """
    if mode not in ("elementwise", "norm"):
        raise ValueError(f"unknown mode {mode!r}")
    for name, p in store.items():
        if p.dtype != torch.float64:
            raise TypeError(f"gradient check needs float64 parameters; {name} is {p.dtype}")

    store.zero_grad()
    loss = f()
    if not torch.isfinite(loss):
        raise NonFiniteError(f"loss is {loss.item()} at the base point; check aborted")
    loss.backward()
    analytic = {name: store.grad(name).detach().clone() for name in store}

    report: dict[str, float] = {}
    with torch.no_grad():
        for name in names or list(store):
            p = store[name]
            flat = p.data.view(-1)
            numeric = torch.empty_like(flat)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                up = f()
                flat[k] = orig - eps
                down = f()
                flat[k] = orig
                if not (torch.isfinite(up) and torch.isfinite(down)):
                    raise NonFiniteError(f"loss non-finite while perturbing {name}[{k}]")
                numeric[k] = (up - down) / (2 * eps)
            a = analytic[name].view(-1)
            if not flat.numel():
                report[name] = 0.0
            elif mode == "norm":
                denom = max(float(a.norm()), float(numeric.norm()), 1e-8)
                report[name] = float((a - numeric).norm()) / denom
            else:
                denom = torch.maximum(torch.maximum(a.abs(), numeric.abs()), torch.tensor(1e-8))
                report[name] = float(((a - numeric).abs() / denom).max())
    store.zero_grad()
    return report
