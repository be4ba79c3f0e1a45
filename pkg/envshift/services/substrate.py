"""
Differentiable Substrate

Dense leaky-relu networks, flat parameter vectors, exact gradients of scalar
losses, Adam updates and Gaussian density helpers. Everything runs in float64.
"""

import logging
import math
from collections.abc import Mapping
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, Field
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from envshift.error_handler import ContractViolation, NumericError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)

Array = Union[np.ndarray, torch.Tensor]
LossFn = Callable[[torch.Tensor], Union[torch.Tensor, Mapping[str, torch.Tensor]]]

ACTIVATIONS = ("leaky_relu", "identity")


# ============================================================================
# Networks
# ============================================================================


class Mlp(nn.Module):
    """
    Dense network of affine layers, each followed by leaky-relu or identity.

    Args:
        dims: layer widths, input first (len >= 2)
        slope: negative slope of every leaky-relu layer, in (0, 1)
        activations: one per layer; defaults to leaky-relu on hidden layers
            and identity on the output layer
        seed: initialise weights from a private generator (deterministic)
    """

    def __init__(
        self,
        dims: Sequence[int],
        slope: float = 0.2,
        activations: Optional[Sequence[str]] = None,
        seed: Optional[int] = None,
    ):
        super().__init__()
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ContractViolation(f"Mlp needs >= 2 positive widths, got {list(dims)}")
        if not 0.0 < slope < 1.0:
            raise ContractViolation(f"leaky-relu slope must be in (0, 1), got {slope}")

        n_layers = len(dims) - 1
        if activations is None:
            activations = ["leaky_relu"] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise ContractViolation(f"Bad activation list {list(activations)} for {n_layers} layers")

        self.slope = float(slope)
        self.activations = list(activations)
        self.layers = nn.ModuleList(
            nn.Linear(dims[k], dims[k + 1], dtype=DTYPE) for k in range(n_layers)
        )
        if seed is not None:
            self.reset_parameters(seed)

    @classmethod
    def from_weights(
        cls,
        weights: Sequence[tuple[Array, Array]],
        activations: Sequence[str],
        slope: float = 0.2,
    ) -> "Mlp":
        """Build a network from explicit (weight out×in, bias out) pairs"""
        dims = [int(np.shape(weights[0][0])[1])] + [int(np.shape(w)[0]) for w, _ in weights]
        for k in range(1, len(weights)):
            if np.shape(weights[k][0])[1] != np.shape(weights[k - 1][0])[0]:
                raise ContractViolation(f"Layer {k} input width does not chain with layer {k - 1}")
        net = cls(dims, slope=slope, activations=activations)
        with torch.no_grad():
            for layer, (w, b) in zip(net.layers, weights):
                layer.weight.copy_(torch.as_tensor(np.asarray(w), dtype=DTYPE))
                layer.bias.copy_(torch.as_tensor(np.asarray(b), dtype=DTYPE))
        return net

    def reset_parameters(self, seed: int) -> None:
        """Uniform(-1/sqrt(in), 1/sqrt(in)) init from a seeded generator"""
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                for p in (layer.weight, layer.bias):
                    p.copy_((torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound)

    def zero_(self) -> "Mlp":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer, activation in zip(self.layers, self.activations):
            x = layer(x)
            if activation == "leaky_relu":
                # x == 0 takes the negative-slope branch
                x = torch.where(x > 0, x, self.slope * x)
        return x


def mlp_apply(net: Mlp, input: Array) -> Array:
    """
    Evaluate a network on one vector or a batch (last axis = features).

    numpy in → numpy out (no graph); tensor in → tensor out.
    """
    if np.shape(input)[-1] != net.in_dim:
        raise ContractViolation(
            f"Input width {np.shape(input)[-1]} does not match network input {net.in_dim}"
        )
    if isinstance(input, torch.Tensor):
        return net(input)
    with torch.no_grad():
        return net(torch.as_tensor(np.asarray(input, dtype=np.float64))).numpy()


# ============================================================================
# Parameter vectors
# ============================================================================


class ParamVector:
    """
    Flat copy of all trainable parameters of a module with a name index.

    index maps parameter name → (offset, shape); offsets are disjoint and
    cover the vector in `named_parameters` order.
    """

    def __init__(self, values: torch.Tensor, index: dict[str, tuple[int, tuple[int, ...]]]):
        self.values = values
        self.index = index

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamVector":
        index = {}
        offset = 0
        for name, p in module.named_parameters():
            index[name] = (offset, tuple(p.shape))
            offset += p.numel()
        values = parameters_to_vector(list(module.parameters())).detach().clone()
        return cls(values, index)

    def __len__(self) -> int:
        return int(self.values.numel())

    def as_dict(self, values: Optional[torch.Tensor] = None) -> dict[str, torch.Tensor]:
        """Name → view of `values` (defaults to the stored vector)"""
        flat = self.values if values is None else values
        return {
            name: flat[offset : offset + math.prod(shape)].view(shape)
            for name, (offset, shape) in self.index.items()
        }

    def load_into(self, module: nn.Module, values: Optional[torch.Tensor] = None) -> None:
        """Write a flat vector back into the module's parameters"""
        flat = self.values if values is None else values
        with torch.no_grad():
            vector_to_parameters(flat.detach().clone(), list(module.parameters()))


# ============================================================================
# Gradients
# ============================================================================


def _evaluate(loss: LossFn, flat: torch.Tensor) -> torch.Tensor:
    """Run the loss, summing named terms and rejecting non-finite values"""
    out = loss(flat)
    if isinstance(out, Mapping):
        total = None
        for name, term in out.items():
            if not torch.isfinite(term).all():
                raise NumericError(f"Loss term '{name}' is not finite", term=name)
            total = term if total is None else total + term
        if total is None:
            raise ContractViolation("Loss returned no terms")
        return total
    if not torch.isfinite(out).all():
        raise NumericError("Loss is not finite", term="loss")
    return out


def _as_flat(params: Union[ParamVector, torch.Tensor]) -> torch.Tensor:
    return params.values if isinstance(params, ParamVector) else params


def loss_grad(loss: LossFn, params: Union[ParamVector, torch.Tensor]) -> tuple[float, torch.Tensor]:
    """
    Value and exact gradient of a scalar loss at a flat parameter vector.

    Raises:
        NumericError: the loss (or one of its named terms) is not finite
    """
    flat = _as_flat(params).detach().clone().requires_grad_(True)
    value = _evaluate(loss, flat)
    if not value.requires_grad:
        return float(value), torch.zeros_like(flat)

    (grad,) = torch.autograd.grad(value, flat, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(flat)
    if not torch.isfinite(grad).all():
        raise NumericError("Gradient is not finite", term="gradient")
    return float(value), grad.detach()


def grad_check(loss: LossFn, params: Union[ParamVector, torch.Tensor], eps: float = 1e-5) -> float:
    """
    Max relative error between analytic and central-difference gradients.

    error_i = |g_i - fd_i| / max(1e-8, |g_i| + |fd_i|); non-finite → inf.
    """
    if eps <= 0:
        raise ContractViolation(f"eps must be positive, got {eps}")
    try:
        _, analytic = loss_grad(loss, params)
    except NumericError:
        return math.inf

    base = _as_flat(params).detach().clone()
    worst = 0.0
    for i in range(base.numel()):
        plus = base.clone()
        plus[i] += eps
        minus = base.clone()
        minus[i] -= eps
        try:
            fd = (float(_evaluate(loss, plus)) - float(_evaluate(loss, minus))) / (2.0 * eps)
        except NumericError:
            return math.inf
        g = float(analytic[i])
        err = abs(g - fd) / max(1e-8, abs(g) + abs(fd))
        if not math.isfinite(err):
            return math.inf
        worst = max(worst, err)

    logger.debug(f"grad_check over {base.numel()} coordinates: max rel error {worst:.3e}")
    return worst


# ============================================================================
# Adam
# ============================================================================


class AdamState(BaseModel):
    """Adam moments and hyperparameters for one flat parameter vector"""

    m: torch.Tensor
    v: torch.Tensor
    t: int = Field(default=0, ge=0)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    class Config:
        arbitrary_types_allowed = True

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(m=torch.zeros(n, dtype=DTYPE), v=torch.zeros(n, dtype=DTYPE), **hyper)


def adam_step(
    params: torch.Tensor, grads: torch.Tensor, state: AdamState
) -> tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam descent step; returns new params and state"""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ContractViolation(
            f"Adam length mismatch: params {tuple(params.shape)}, grads {tuple(grads.shape)}, "
            f"state {tuple(state.m.shape)}"
        )

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2

    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    updated = params - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)

    return updated, state.model_copy(update={"m": m, "v": v, "t": t})


# ============================================================================
# Gaussian helpers
# ============================================================================


def gaussian_logpdf(x: Array, mean: Array, logvar: Array) -> Array:
    """Diagonal Gaussian log density, summed over the last axis"""
    if isinstance(x, torch.Tensor) or isinstance(mean, torch.Tensor) or isinstance(logvar, torch.Tensor):
        x, mean, logvar = (torch.as_tensor(a, dtype=DTYPE) for a in (x, mean, logvar))
        return (-0.5 * LOG_2PI - 0.5 * logvar - 0.5 * (x - mean) ** 2 * torch.exp(-logvar)).sum(-1)
    x, mean, logvar = (np.asarray(a, dtype=np.float64) for a in (x, mean, logvar))
    return (-0.5 * LOG_2PI - 0.5 * logvar - 0.5 * (x - mean) ** 2 * np.exp(-logvar)).sum(-1)


def reparam_sample(mean: Array, logvar: Array, noise: Array) -> Array:
    """mean + exp(logvar / 2) * noise"""
    if isinstance(mean, torch.Tensor):
        return mean + torch.exp(0.5 * logvar) * noise
    return np.asarray(mean) + np.exp(0.5 * np.asarray(logvar)) * np.asarray(noise)
