"""Shared test oracles: central finite differences against backward()."""

import numpy as np

from attnfold import backward, forward


def projection_loss(graph, params, x, proj):
    """Scalar loss <logits, proj>; returns (loss, param grads, input grad)."""
    logits, tape = forward(graph, params, x, mode="train")
    loss = float((logits.data * proj).sum())
    params.zero_grads()
    backward(tape, proj)
    grads = {n: params.grads[n].copy() for n in sorted(params.trainable)}
    return loss, grads


def rel_err(a, f, *, zero_tol=1e-8):
    denom = max(abs(a), abs(f))
    if denom < zero_tol:
        return 0.0 if abs(a - f) < zero_tol else abs(a - f)
    return abs(a - f) / denom


def check_param_gradients(graph, params, x, *, proj_seed=0, step=1e-5,
                          rel_tol=1e-6, max_elems=6):
    """Central finite differences on a sample of elements of every parameter."""
    rng = np.random.default_rng(proj_seed)
    logits, _ = forward(graph, params, x, mode="eval")
    proj = rng.standard_normal(logits.shape)
    _, grads = projection_loss(graph, params, x, proj)
    worst = 0.0
    for name in sorted(params.trainable):
        arr = params.values[name]
        flat = arr.reshape(-1)
        n = flat.size
        idx = rng.choice(n, size=min(n, max_elems), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = projection_loss(graph, params, x, proj)
            flat[i] = orig - step
            lm, _ = projection_loss(graph, params, x, proj)
            flat[i] = orig
            fd = (lp - lm) / (2 * step)
            an = grads[name].reshape(-1)[i]
            err = rel_err(an, fd)
            worst = max(worst, err)
            assert err < rel_tol, (f"{name}[{i}]: analytic {an!r} vs fd {fd!r} "
                                   f"(rel err {err:.2e})")
    return worst
