import numpy as np

from dotcnet import tensor as T


def probe_gradients(op, shapes, probes=100, seed=0, h=1e-5, positive=False):
    """Relative errors of backprop vs central differences at random probes.

    ``op`` maps input tensors to an output tensor; the scalar loss is a
    fixed random weighting of that output so no gradient is trivially zero.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.1, 2.0, size=s) if positive else rng.standard_normal(s) for s in shapes]
    probe_out = op(*[T.Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe_out.shape)

    def loss_value():
        return float((op(*[T.Tensor(a) for a in arrays]).data * weights).sum())

    inputs = [T.Tensor(a, requires_grad=True) for a in arrays]
    T.backward(T.tsum(T.mul(op(*inputs), T.Tensor(weights))))
    errors = []
    for _ in range(probes):
        which = int(rng.integers(len(arrays)))
        arr = arrays[which]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        up = loss_value()
        arr[idx] = orig - h
        down = loss_value()
        arr[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = inputs[which].grad[idx]
        denom = max(abs(numeric), abs(analytic))
        errors.append(0.0 if denom == 0 else abs(numeric - analytic) / denom)
    return np.array(errors)
