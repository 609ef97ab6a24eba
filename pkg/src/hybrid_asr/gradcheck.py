"""Central finite-difference gradient checking against the tape."""
import numpy as np

from .tensor import Tape, Tensor


def _projected_loss(fn, tensors, proj):
    out = fn(*tensors)
    return float(np.sum(out.data * proj)) if proj is not None else float(out.data.sum())


def numerical_gradients(fn, arrays, proj=None, eps=1e-6):
    """Central differences of ``sum(fn(*arrays) * proj)`` with respect to each array."""
    grads = []
    for i, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            plus = _projected_loss(fn, [Tensor(a) for a in arrays], proj)
            flat[j] = orig - eps
            minus = _projected_loss(fn, [Tensor(a) for a in arrays], proj)
            flat[j] = orig
            gflat[j] = (plus - minus) / (2 * eps)
        grads.append(g)
    return grads


def tape_gradients(fn, arrays, proj=None):
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*params)
        loss = (out * Tensor(proj)).sum() if proj is not None else out.sum()
    tape.backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def relative_error(a, b):
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, arrays, seed=0, eps=1e-6):
    """Worst relative error between tape and finite-difference gradients.

    ``fn`` maps Tensors to a Tensor of any shape; its output is contracted
    with a fixed random projection so every Jacobian row participates.
    Arrays should be float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    proj = np.random.default_rng(seed).standard_normal(out_shape)
    analytic = tape_gradients(fn, arrays, proj)
    numeric = numerical_gradients(fn, arrays, proj, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def directional_errors(loss_fn, params, seed=0, eps=1e-6):
    """Per-parameter directional derivative check.

    For every named Tensor in ``params`` a random unit direction ``v`` is
    drawn; the tape value ``<grad, v>`` is compared with the central
    difference of ``loss_fn()`` along ``v``. ``loss_fn`` takes no arguments
    and must return a scalar Tensor built from ``params`` (they are perturbed
    in place and restored). Returns ``{name: relative error}``.
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        v = rng.standard_normal(p.shape)
        v /= max(np.linalg.norm(v), 1e-30)
        analytic = float(np.sum((p.grad if p.grad is not None else 0.0) * v))
        orig = p.data.copy()
        p.data = orig + eps * v
        plus = float(loss_fn().data.sum())
        p.data = orig - eps * v
        minus = float(loss_fn().data.sum())
        p.data = orig
        numeric = (plus - minus) / (2 * eps)
        errors[name] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
    return errors
