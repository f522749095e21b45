"""Adam updates over flat parameter buffers and sparse field gradients.

One instance per parameter block; moments persist across steps even when
the caller swaps the learning rate every iteration.
"""

import numpy as np


class Adam:

    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float64):
        self.m = np.zeros(n, dtype=dtype)
        self.v = np.zeros(n, dtype=dtype)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0

    def step(self, params, grad, lr):
        """Bias-corrected update, in place on ``params``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m += (1.0 - b1) * (grad - self.m)
        self.v += (1.0 - b2) * (grad * grad - self.v)
        m_hat = self.m / (1.0 - b1 ** self.t)
        v_hat = self.v / (1.0 - b2 ** self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


class FieldAdam:
    """Adam over an SdfField: dense on the MLP, lazy on the feature tables.

    A batch touches a sliver of the feature rows, so moments of untouched
    rows are left as-is and only rows present in the gradient packet are
    updated (the usual sparse-Adam approximation, with the global step
    count for bias correction).  Tiny moments are flushed to zero to keep
    float32 denormals out of the arithmetic.
    """

    def __init__(self, field, beta1=0.9, beta2=0.999, eps=1e-8):
        self.field = field
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m_level = [np.zeros_like(t) for t in field.level_tables]
        self.v_level = [np.zeros_like(t) for t in field.level_tables]
        self.m_mlp = np.zeros(field.n_mlp_params, dtype=np.float64)
        self.v_mlp = np.zeros(field.n_mlp_params, dtype=np.float64)

    def step(self, grads, lr):
        """Apply one update from a FieldGrads packet."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t

        g = grads.mlp
        self.m_mlp += (1.0 - b1) * (g - self.m_mlp)
        self.v_mlp += (1.0 - b2) * (g * g - self.v_mlp)
        mlp = self.field.params[self.field.feature_count:]
        mlp -= lr * (self.m_mlp / c1) \
            / (np.sqrt(self.v_mlp / c2) + self.eps)

        for level, rows in enumerate(grads.rows):
            if rows is None or rows.size == 0:
                continue
            gv = grads.vals[level]
            m = self.m_level[level][rows].astype(np.float64)
            v = self.v_level[level][rows].astype(np.float64)
            m += (1.0 - b1) * (gv - m)
            v += (1.0 - b2) * (gv * gv - v)
            m[np.abs(m) < 1e-30] = 0.0
            v[v < 1e-24] = 0.0
            self.m_level[level][rows] = m
            self.v_level[level][rows] = v
            table = self.field.level_tables[level]
            table[rows] = table[rows] - lr * (m / c1) \
                / (np.sqrt(v / c2) + self.eps)
