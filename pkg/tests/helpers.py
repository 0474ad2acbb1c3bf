"""Finite-difference gradient checking for piecewise-smooth networks."""

import contextlib

import torch
import torch.nn.functional as F


@contextlib.contextmanager
def frozen_kinks():
    """Pins every leaky-ReLU/ReLU branch to the pattern seen on the first pass.

    The first forward pass inside the context records which side of the kink
    each pre-activation fell on; later passes reuse those masks in call order.
    Central differences then measure the derivative of the smooth branch that
    autodiff differentiates, instead of averaging two slopes when the stencil
    straddles a kink.
    """
    masks, state = [], {'recording': True, 'pos': 0}
    leaky, relu = F.leaky_relu, F.relu

    def pick(x, slope):
        if state['recording']:
            masks.append(x >= 0)
            m = masks[-1]
        else:
            m = masks[state['pos']]
            state['pos'] += 1
        return torch.where(m, x, slope * x)

    def patched_leaky(x, negative_slope=0.01, inplace=False):
        return pick(x, negative_slope)

    def patched_relu(x, inplace=False):
        return pick(x, 0.0)

    def replay():
        state['recording'] = False
        state['pos'] = 0

    F.leaky_relu, F.relu = patched_leaky, patched_relu
    try:
        yield replay
    finally:
        F.leaky_relu, F.relu = leaky, relu


def central_differences(f, x, h=1e-4, coords=None, freeze=True):
    """Autodiff gradient of scalar ``f`` at ``x`` and its central-difference estimate.

    Returns ``(grad, fd, idx)`` restricted to the coordinates ``coords``
    (all by default).
    """
    x = x.detach().clone().requires_grad_(True)
    idx = torch.arange(x.numel()) if coords is None else torch.as_tensor(coords)
    ctx = frozen_kinks() if freeze else contextlib.nullcontext(lambda: None)
    with ctx as replay:
        y = f(x)
        grad, = torch.autograd.grad(y, x)
        fd = torch.zeros(len(idx), dtype=x.dtype)
        with torch.no_grad():
            for j, i in enumerate(idx):
                e = torch.zeros_like(x).view(-1)
                e[i] = h
                e = e.view_as(x)
                replay()
                plus = f(x + e)
                replay()
                minus = f(x - e)
                fd[j] = (plus - minus) / (2 * h)
    return grad.reshape(-1)[idx], fd, idx


def relative_error(grad, fd) -> float:
    """``|g - fd| / max(|g|, |fd|)`` over the whole checked vector."""
    denom = torch.maximum(grad.norm(), fd.norm())
    if denom == 0:
        return 0.0
    return ((grad - fd).norm() / denom).item()
