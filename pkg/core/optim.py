import numpy as np


class SGD:
    """
    Momentum SGD with coupled weight decay.

    velocity = momentum * velocity + grad + weight_decay * param
    param   -= lr * velocity
    Gradients are zeroed after every step.
    """

    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        for p in self.params:
            v = self.velocity[p.name]
            d_p = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += d_p
            p.data -= (self.lr * v).astype(p.data.dtype, copy=False)
            p.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_dict(self):
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state_dict(self, state):
        for name, v in state.items():
            if name in self.velocity:
                self.velocity[name][...] = v


def sgd_step(params, lr, momentum=0.9, weight_decay=5e-4, optimizer=None):
    """One update over `params`; pass `optimizer` to keep velocities across calls."""
    optimizer = optimizer or SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    optimizer.lr = float(lr)
    optimizer.step()
    return optimizer
