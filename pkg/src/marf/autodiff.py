"""Gradient and directional-derivative utilities.

Reverse-mode gradients of scalar losses, forward-mode directional
derivatives (jvp) of vector programs, and their composition: tangents
produced by jvp remain differentiable in reverse mode, which the
multi-view loss needs (a second-order quantity).

Everything runs in 64-bit floats. Two independent finite-difference
routines are provided as oracles; they never touch the AD machinery.

Note: layer normalization must be composed from elementary ops rather than
F.layer_norm. The fused kernel's forward-mode tangent carries an incorrect
backward graph (verified against central differences), while the
elementary-op composition is exact.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import torch
import torch.autograd.forward_ad as fwAD

Tensor = torch.Tensor


class UnsupportedOperationError(RuntimeError):
    """An operation in the differentiated program has no gradient rule."""


class DualVector(NamedTuple):
    """A primal value bundled with k directional-derivative channels."""

    primal: Tensor | tuple
    tangents: tuple


def stop_gradient(x: Tensor) -> Tensor:
    """Pass the value through; contribute zero adjoint on the way back."""
    return x.detach()


def gradient(loss: Tensor, params: Sequence[Tensor], create_graph: bool = False,
             retain_graph: bool | None = None) -> tuple[Tensor, ...]:
    """d(loss)/d(theta) for every parameter of a scalar loss.

    Parameters the loss does not depend on get a genuine zero gradient.
    Non-differentiable operations raise UnsupportedOperationError instead
    of silently returning zeros.
    """
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    params = tuple(params)
    try:
        grads = torch.autograd.grad(
            loss, params, create_graph=create_graph,
            retain_graph=retain_graph, allow_unused=True,
        )
    except RuntimeError as exc:
        raise UnsupportedOperationError(str(exc)) from exc
    return tuple(
        g if g is not None else torch.zeros_like(p)
        for g, p in zip(grads, params)
    )


def _as_tuple(x):
    return x if isinstance(x, tuple) else (x,)


def jvp(fn: Callable, x: Tensor, directions: Sequence[Tensor]) -> DualVector:
    """Forward-mode directional derivatives of fn at x along k directions.

    fn maps one tensor to a tensor or a tuple of tensors. Returns the
    primal outputs and, per direction, matching tangent outputs. Tangents
    stay connected to the autograd graph of any parameters captured by fn,
    so scalars built from them can be differentiated in reverse mode.
    """
    primal = None
    tangents = []
    for v in directions:
        with fwAD.dual_level():
            out = fn(fwAD.make_dual(x, v))
            outs = _as_tuple(out)
            prim, tang = [], []
            for o in outs:
                p, t = fwAD.unpack_dual(o)
                prim.append(p)
                tang.append(t if t is not None else torch.zeros_like(p))
            if primal is None:
                primal = tuple(prim) if isinstance(out, tuple) else prim[0]
            tangents.append(tuple(tang) if isinstance(out, tuple) else tang[0])
    return DualVector(primal, tuple(tangents))


def jvp_finite_difference(fn: Callable, x: Tensor, directions: Sequence[Tensor],
                          step: float = 1e-5) -> DualVector:
    """Central-difference stand-in for jvp (two extra evaluations per axis).

    The difference quotients are built from ordinary evaluations of fn, so
    they remain differentiable w.r.t. parameters captured by fn. Used as a
    configuration switch behind the multi-view loss and as a cross-check.
    """
    primal = fn(x)
    tangents = []
    for v in directions:
        hi = _as_tuple(fn(x + step * v))
        lo = _as_tuple(fn(x - step * v))
        tang = tuple((a - b) / (2.0 * step) for a, b in zip(hi, lo))
        tangents.append(tang if isinstance(primal, tuple) else tang[0])
    return DualVector(primal, tuple(tangents))


def reverse_over_forward(scalar_fn: Callable[[], Tensor],
                         params: Sequence[Tensor]) -> tuple[Tensor, ...]:
    """Gradient of a scalar assembled from jvp tangent channels.

    scalar_fn runs the forward-mode computation (via jvp) and reduces its
    tangents to a scalar; the reverse sweep then differentiates that scalar
    w.r.t. params.
    """
    return gradient(scalar_fn(), params)


def finite_difference_gradient(fn: Callable[[], Tensor], params: Sequence[Tensor],
                               step: float = 1e-5) -> list[Tensor]:
    """Independent central-difference gradient oracle, coordinate by coordinate.

    fn re-evaluates the loss from the current parameter values; parameters
    are perturbed in place under no_grad. Never uses autograd.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(fn())
                flat[i] = orig - step
                lo = float(fn())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * step)
            grads.append(g)
    return grads
