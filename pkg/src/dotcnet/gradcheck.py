"""Finite-difference audit of every learnable parameter of a small network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import NetConfig, init_network, make_branches, net_forward
from .training import TrainConfig, total_loss

GROUPS = ("gabor", "psi", "fc")


def tiny_config(num_classes=3, embed_dim=8):
    """Three branches with 2 filters each, kernels 7/11/15, 40x40 input."""
    return NetConfig(num_classes=num_classes, branches=make_branches(kernels=(7, 11, 15), filters=(2, 2, 2)),
                     embed_dim=embed_dim, input_size=(40, 40))


def group_of(name):
    if ".lgf" in name:
        return "gabor"
    if ".tam" in name:
        return "psi"
    return "fc"


def relative_error(analytic, numeric):
    a, n = abs(analytic), abs(numeric)
    denom = max(a, n)
    return 0.0 if denom == 0 else abs(analytic - numeric) / denom


@dataclass
class GroupReport:
    group: str
    count: int
    max_rel_error: float
    worst_parameter: str

    def passed(self, tol):
        return self.max_rel_error < tol


def loss_fn(cfg, train_cfg, images, labels):
    def f(state):
        emb, logits = net_forward(images, cfg, state)
        return total_loss(logits, emb, labels, train_cfg)[0]
    return f


def check_network(cfg=None, seed=0, h=1e-5, batch=4, corrupt=None, max_per_param=None):
    """Compare backprop against central differences for every parameter element.

    Everything runs in double precision. ``corrupt`` names a group whose
    analytic gradient is deliberately scaled by 1.01 (a sensitivity hook).
    ``max_per_param`` limits the elements probed per tensor (None = all).
    """
    cfg = cfg or tiny_config()
    rng = np.random.default_rng(seed)
    state = init_network(cfg, seed).astype(np.float64)
    for name, p in state.parameters().items():
        if name.endswith("bias"):
            # zero biases sit on a symmetric point; nudge them so the check is generic
            p.data = rng.uniform(-0.1, 0.1, size=p.shape)
    images = rng.uniform(0, 1, size=(batch, 1) + tuple(cfg.input_size))
    labels = np.arange(batch) % cfg.num_classes
    train_cfg = TrainConfig()
    f = loss_fn(cfg, train_cfg, images, labels)

    loss = f(state)
    T.backward(loss)
    worst = {g: (0.0, "", 0) for g in GROUPS}
    for name, p in state.parameters().items():
        grp = group_of(name)
        analytic = p.grad.copy()
        if corrupt == grp:
            analytic *= 1.01
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        err_max, count = worst[grp][0], worst[grp][2]
        worst_name = worst[grp][1]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = f(state).item()
            flat[i] = orig - h
            down = f(state).item()
            flat[i] = orig
            err = relative_error(analytic.reshape(-1)[i], (up - down) / (2 * h))
            if err > err_max:
                err_max, worst_name = err, f"{name}[{i}]"
        worst[grp] = (err_max, worst_name, count + len(idx))
    return [GroupReport(g, worst[g][2], worst[g][0], worst[g][1]) for g in GROUPS if worst[g][2]]
