import numpy as np


def adam_step(params, grads, state, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction.

    ``state`` maps each parameter name to ``(m, v)`` and is filled lazily.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state:
            state[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / p.dtype.type(c1)
        vhat = v / p.dtype.type(c2)
        p -= p.dtype.type(lr) * mhat / (np.sqrt(vhat) + p.dtype.type(eps))
    return params, state


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        adam_step(params, grads, self.state, self.t, lr, self.beta1, self.beta2, self.eps)
