"""Gradient plumbing, finite-difference checks and seeded randomness.

Tensors are plain ``torch.Tensor`` values; reverse-mode differentiation is
torch autograd. The finite-difference routines here never touch autograd, so
they serve as an independent check of every analytic gradient.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

Tensor = torch.Tensor


class NonFiniteError(RuntimeError):
    """Raised when a loss or gradient contains NaN or Inf."""


def check_finite(name: str, value: Tensor) -> None:
    if not bool(torch.isfinite(value).all()):
        bad = int((~torch.isfinite(value)).sum())
        raise NonFiniteError(f"{name}: {bad} non-finite element(s) in tensor of shape {tuple(value.shape)}")


def forward_and_backward(f: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[Tensor, list[Tensor]]:
    """Evaluate ``f()`` and return its value with d value / d param for each param.

    Unused parameters get an all-zero gradient.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("every parameter must have requires_grad=True")
    value = f()
    if not isinstance(value, Tensor):
        raise TypeError(f"f must return a tensor, got {type(value).__name__}")
    if value.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(value.shape)}")
    value = value.reshape(())
    if value.grad_fn is None and not any(value is p for p in params):
        # the value left the autograd graph, e.g. via numpy or .detach()
        raise ValueError("f is not composed of differentiable primitives; no gradient graph recorded")
    grads = torch.autograd.grad(value, params, allow_unused=True)
    out = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return value.detach(), out


def _as_index(flat: int, shape: torch.Size) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(flat, tuple(shape))) if len(shape) else ()


@torch.no_grad()
def _central_difference(f: Callable[[], Tensor], p: Tensor, idx: tuple[int, ...], h: float,
                        pattern: Callable[[], Tensor] | None = None) -> tuple[float, bool]:
    """(estimate, straddles_kink); the flag is only computed when ``pattern`` is given."""
    orig = p[idx].item()
    base = None if pattern is None else pattern()
    p[idx] = orig + h
    up = float(f())
    moved = pattern is not None and not torch.equal(pattern(), base)
    p[idx] = orig - h
    down = float(f())
    moved = moved or (pattern is not None and not torch.equal(pattern(), base))
    p[idx] = orig
    if pattern is not None:
        f()  # leave the recorded pattern at the unperturbed point
    return (up - down) / (2.0 * h), moved


def finite_difference_gradient(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[Tensor]:
    """Central-difference estimate of the gradient of scalar ``f()`` for every coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    grads = []
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("finite differences require float64 parameters")
        g = torch.zeros_like(p)
        for flat in range(p.numel()):
            idx = _as_index(flat, p.shape)
            g[idx] = _central_difference(f, p, idx, h)[0]
        grads.append(g)
    return grads


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from dividing by ~0."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_probes: int
    worst: tuple[int, tuple[int, ...], float, float] | None  # (param index, coord, analytic, numeric)
    redrawn: int = 0  # probes replaced because they straddled a kink

    def passed(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_error <= rtol


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_probes: int = 20,
    h: float = 1e-5,
    seed: int = 0,
    pattern: Callable[[], Tensor] | None = None,
    max_redraws: int = 50,
) -> GradCheckResult:
    """Compare autograd against central differences at ``n_probes`` random coordinates.

    Probes are spread over the parameters in proportion to their size, with every
    parameter probed at least once when ``n_probes`` allows it.

    ``pattern`` returns the on/off state of the piecewise-linear units after the
    latest call of ``f``. A probe whose +h or -h evaluation changes that state
    straddles a kink, where the central difference does not estimate the
    derivative; such a probe is redrawn at another coordinate of the same
    parameter and counted in ``redrawn``.
    """
    params = list(params)
    _, analytic = forward_and_backward(f, params)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params], dtype=float)
    which = list(rng.permutation(len(params))[: min(n_probes, len(params))])
    while len(which) < n_probes:
        which.append(int(rng.choice(len(params), p=sizes / sizes.sum())))
    worst, worst_err, redrawn = None, 0.0, 0
    for k in which:
        p = params[k]
        for _ in range(max_redraws + 1):
            idx = _as_index(int(rng.integers(p.numel())), p.shape)
            num, straddles = _central_difference(f, p, idx, h, pattern)
            if not straddles:
                break
            redrawn += 1
        else:
            raise RuntimeError(f"no kink-free probe found for parameter {k} after {max_redraws} redraws")
        ana = float(analytic[k][idx])
        err = relative_error(ana, num)
        if worst is None or err > worst_err:
            worst, worst_err = (int(k), idx, ana, num), err
    return GradCheckResult(worst_err, len(which), worst, redrawn)


def derive_seed(seed: int, name: str) -> int:
    """Sub-seed for a named consumer: SeedSequence([seed, crc32(name)]) -> 63-bit int."""
    state = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & 0x7FFFFFFFFFFFFFFF


class SeededRng:
    """A 64-bit seeded stream backed by numpy's PCG64, splittable by name."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.np = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, name: str) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, name))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.np.integers(0, 2**63 - 1)))
        return g


def seeded_random_tensor(
    shape: Sequence[int],
    distribution: str,
    rng: SeededRng,
    *,
    mean: float = 0.0,
    std: float = 1.0,
    low: float = 0.0,
    high: float = 1.0,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"invalid shape {shape}")
    if distribution == "uniform":
        arr = rng.np.uniform(low, high, size=shape)
    elif distribution == "normal":
        arr = rng.np.normal(mean, std, size=shape)
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    return torch.as_tensor(arr, dtype=dtype)
