"""Shared oracles for the test modules."""

import numpy as np
import torch


def central_difference(fn, inputs, eps=1e-6):
    """Numerical gradient of scalar ``fn(*inputs)`` for every input tensor."""
    grads = []
    for x in inputs:
        g = torch.zeros_like(x)
        flat, gflat = x.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn(*inputs).item()
            flat[i] = orig - eps
            lo = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def grad_relative_error(fn, inputs, eps=1e-6):
    """||analytic - numeric|| / max(||analytic||, ||numeric||) over all inputs jointly.

    Taken jointly so that inputs whose gradient is at round-off level do not
    dominate the ratio.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*inputs), inputs, allow_unused=True)
    analytic = [torch.zeros_like(x) if a is None else a for a, x in zip(analytic, inputs)]
    with torch.no_grad():
        numeric = central_difference(fn, inputs, eps)
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return (a - n).norm().item() / max(a.norm().item(), n.norm().item(), 1e-300)


def brute_force_mha(q, k, v, w_q, w_k, w_v, w_o):
    """Per-head loop: project, attend, concatenate, project (numpy, float64)."""
    heads = []
    for i in range(w_q.shape[0]):
        qi, ki, vi = q @ w_q[i], k @ w_k[i], v @ w_v[i]
        s = qi @ ki.T / np.sqrt(qi.shape[-1])
        s = s - s.max(axis=-1, keepdims=True)
        w = np.exp(s) / np.exp(s).sum(axis=-1, keepdims=True)
        heads.append(w @ vi)
    return np.concatenate(heads, axis=-1) @ w_o
