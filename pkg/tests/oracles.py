"""Independent reference computations shared by unit and acceptance tests."""

from collections import deque

import numpy as np

from furuta_rt import neural


def fd_gradient_error(params, x, u, h=1e-5):
    """Worst relative error of backward() against central differences.

    The loss is ``sum(forward(x) * u)``. Errors are measured array-wise as
    ``|g - fd| / max(|g|, |fd|)`` in the 2-norm, including the input gradient.
    """
    grads, gin = neural.backward(params, x, u)

    def loss():
        return float(np.sum(neural.forward(params, x) * u))

    worst = 0.0
    for arr, g in zip(params.arrays(), grads):
        fd = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss()
            arr[idx] = old - h
            down = loss()
            arr[idx] = old
            fd[idx] = (up - down) / (2 * h)
        worst = max(worst, _rel(g, fd))
    fd_in = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = loss()
        x[idx] = old - h
        down = loss()
        x[idx] = old
        fd_in[idx] = (up - down) / (2 * h)
    return max(worst, _rel(gin, fd_in))


def _rel(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def random_mlp(rng):
    depth = int(rng.integers(1, 5))
    sizes = [int(rng.integers(1, 9)) for _ in range(depth + 1)]
    output = "tanh" if rng.random() < 0.3 else "identity"
    return neural.init(sizes, int(rng.integers(1 << 31)), output,
                       float(rng.uniform(0.5, 3.0)))


def hand_delayed_actions(plan_values, n_steps, d, H_e):
    """Action stream of the buffered loop, simulated by hand.

    Decision k happens at tick k*H_e and calls the planner for the k-th time;
    its H_e committed actions arrive at tick k*H_e + d. The first d ticks run
    on a bootstrap of zeros. ``plan_values[k]`` is the constant the k-th plan
    repeats.
    """
    buffer = deque([0.0] * d)
    arrivals = {}
    out = []
    k = 0
    for t in range(n_steps):
        if t in arrivals:
            buffer.extend(arrivals.pop(t))
        if t % H_e == 0:
            arrivals[t + d] = [plan_values[k]] * H_e
            k += 1
            if d == 0:
                buffer.extend(arrivals.pop(t))
        out.append(buffer.popleft())
    return out
