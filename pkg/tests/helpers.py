"""Shared test utilities: finite-difference gradient oracle and graph builders."""

import numpy as np

from nrxsim import autodiff as ad


def gradcheck(build_loss, params, h=1e-4, tol=1e-4):
    """Compare backward() against central finite differences at float64.

    `build_loss` maps a dict of Tensors to a scalar loss Tensor and is called
    fresh for every probe, so the recorded graph is never reused. Returns the
    worst relative error across all parameters.
    """
    for name, arr in params.items():
        assert arr.dtype == np.float64, f"gradcheck wants float64 params, got {arr.dtype} for {name}"

    tensors = {k: ad.Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    loss = build_loss(tensors)
    ad.backward(loss)
    analytic = {k: t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for k, t in tensors.items()}

    worst = 0.0
    for name, base in params.items():
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            for sign, store in ((+1, 0), (-1, 1)):
                probe = {k: v.copy() for k, v in params.items()}
                probe[name].reshape(-1)[i] += sign * h
                t = {k: ad.Tensor(v, requires_grad=False) for k, v in probe.items()}
                val = build_loss(t).item()
                if sign > 0:
                    plus = val
                else:
                    minus = val
            numeric.reshape(-1)[i] = (plus - minus) / (2 * h)
        ga, gn = analytic[name], numeric
        denom = np.maximum(1.0, np.maximum(np.abs(ga), np.abs(gn)))
        err = float(np.max(np.abs(ga - gn) / denom))
        worst = max(worst, err)
        assert err <= tol, f"gradient check failed for '{name}': rel err {err:.3e} > {tol}"
    return worst


def random_graph_loss(seed, depth=6):
    """Build (params, fn) for a randomly composed graph over the op set.

    The sampled op sequence mixes elementwise ops, relu, concat, slicing,
    reshape and reductions; the loss mixes in bce and mse heads so every op
    kind also appears downstream of a loss.
    """
    rng = np.random.default_rng(seed)
    shape = (2, 3, 4)
    params = {"x0": rng.normal(size=shape) + 0.3}
    ops = []
    n_extra = 0
    for d in range(depth):
        kind = rng.choice(["add", "mul", "relu", "concat", "slice", "scale"])
        if kind in ("add", "mul", "concat"):
            n_extra += 1
            params[f"p{n_extra}"] = rng.normal(size=shape) + 0.2
        ops.append((kind, n_extra, float(rng.normal())))

    bits = (rng.random(size=shape) < 0.5).astype(np.float64)
    target = rng.normal(size=shape)

    def fn(t):
        cur = t["x0"]
        for kind, idx, const in ops:
            if kind == "add":
                cur = ad.add(cur, t[f"p{idx}"])
            elif kind == "mul":
                cur = ad.mul(cur, t[f"p{idx}"])
            elif kind == "relu":
                cur = ad.relu(ad.add(cur, 0.05))
            elif kind == "concat":
                cur = ad.concat([cur, t[f"p{idx}"]], axis=-1)[..., :shape[-1]]
            elif kind == "slice":
                cur = ad.concat([cur[..., :2], cur[..., 2:]], axis=-1)
            elif kind == "scale":
                cur = ad.mul(cur, const)
        head = cur.reshape((shape[0] * shape[1], shape[2]))
        pooled = head.mean(axis=0, keepdims=True)
        return ad.add(ad.bce_with_logits(cur, bits), ad.mse(pooled.reshape((shape[2],)), target.mean(axis=(0, 1))))

    return params, fn


def conv_net_loss(seed):
    """Small conv + dense network with both losses, for composed gradchecks."""
    rng = np.random.default_rng(seed)
    n, h, w, ci, cm, co = 2, 5, 4, 3, 4, 2
    params = {
        "x": rng.normal(size=(n, h, w, ci)),
        "w1": rng.normal(size=(3, 3, ci, cm)) * 0.5,
        "b1": rng.normal(size=(cm,)) * 0.1,
        "w2": rng.normal(size=(cm, co)) * 0.5,
        "b2": rng.normal(size=(co,)) * 0.1,
    }
    bits = (rng.random(size=(n, h, w, co)) < 0.5).astype(np.float64)
    target = rng.normal(size=(n, h, w, co))

    def fn(t):
        z = ad.relu(ad.add(ad.conv2d(t["x"], t["w1"]), t["b1"]))
        flat = z.reshape((n * h * w, cm))
        out = ad.add(ad.matmul(flat, t["w2"]), t["b2"]).reshape((n, h, w, co))
        agg = ad.sum_others(out, axis=0)
        return ad.add(ad.bce_with_logits(out, bits), ad.mul(ad.mse(agg, target), 0.5))

    return params, fn
