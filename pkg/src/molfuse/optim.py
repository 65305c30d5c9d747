"""Adam optimizer with bias correction, keyed by parameter node ids."""

import numpy as np


class GradientMissing(KeyError):
    pass


class AdamState:
    """First/second moment buffers plus the shared step counter t."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.node_id: np.zeros_like(p.values) for p in params}
        self.v = {p.node_id: np.zeros_like(p.values) for p in params}


def adam_step(params, grads, state):
    """One in-place Adam update; t increments exactly once per call.

    ``grads`` maps node_id -> gradient array (the output of backward()).
    Every parameter must have an entry of matching shape.
    """
    for p in params:
        if p.node_id not in grads:
            label = p.name or f"node{p.node_id}"
            raise GradientMissing(f"no gradient entry for parameter '{label}'")
        if grads[p.node_id].shape != p.values.shape:
            label = p.name or f"node{p.node_id}"
            raise ValueError(
                f"gradient shape {grads[p.node_id].shape} does not match "
                f"parameter '{label}' shape {p.values.shape}"
            )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for p in params:
        g = grads[p.node_id]
        m = state.m[p.node_id]
        v = state.v[p.node_id]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.checked = False  # values changed; revalidate on next use
    return params, state
