"""Independent oracles shared by the unit and acceptance tests."""
import numpy as np
import torch

from mtpix2pix.losses import discriminator_loss, generator_loss
from mtpix2pix.models import SchemeConfig, build_discriminator, build_generator


def brute_force_areas(pm, gt, c):
    tp = fp = fn = 0
    for y in range(len(gt)):
        for x in range(len(gt[0])):
            p, g = pm[y][x] == c, gt[y][x] == c
            tp += p and g
            fp += p and not g
            fn += (not p) and g
    return tp, fp, fn


def brute_force_mssim(x, y, window=8, L=255.0):
    """Direct per-window evaluation with explicit Python loops."""
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    h, w = len(x), len(x[0])
    vals = []
    n = window * window
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            a = [float(x[i + u][j + v]) for u in range(window) for v in range(window)]
            b = [float(y[i + u][j + v]) for u in range(window) for v in range(window)]
            ma, mb = sum(a) / n, sum(b) / n
            va = sum((t - ma) ** 2 for t in a) / n
            vb = sum((t - mb) ** 2 for t in b) / n
            cov = sum((s - ma) * (t - mb) for s, t in zip(a, b)) / n
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def tiny_problem(scheme="mtdg", size=16, base_width=2, seed=0):
    cfg = SchemeConfig(scheme, size, base_width)
    g = build_generator(cfg, seed).double()
    d = build_discriminator(cfg, seed).double()
    rng = np.random.default_rng(seed)
    X = torch.from_numpy(rng.uniform(-1, 1, (1, 3, size, size)))
    Y = torch.from_numpy(rng.uniform(-1, 1, (1, cfg.out_channels, size, size)))
    return cfg, g, d, X, Y


def losses_of(g, d, X, Y, lam=10.0):
    Yhat = g(X, training=False)
    lg = generator_loss(d(X, Yhat), Y, Yhat, lam).total
    ld = discriminator_loss(d(X, Y), d(X, Yhat)).total
    return lg, ld


def _blocks(g, d):
    return [m for net in (g, d) for m in net.modules() if hasattr(m, "spec")]


def smooth_test_point(g, d, X, seed=0, margin=3.0, norm_scale=0.1, offset=0.3):
    """Move both networks to a point where central differences are well defined.

    Conv weights get unit fan-in scale. Inputs to ReLU are kept positive so no
    path is dead; inputs to LeakyReLU get a random-sign shift. Under batch norm
    the shift is sqrt(N) + 1 for N normalized values, which keeps every value at
    least 1 away from zero (normalized values lie within +-sqrt(N - 1)). Without
    batch norm the conv bias provides a shift of ``margin``. The returned target
    sits ``offset`` below the generator output, so the L1 term has no kink nearby
    and its gradient does not cancel across pixels.
    """
    gen = torch.Generator().manual_seed(seed)
    sizes = {}
    hooks = [b.norm.register_forward_hook(
        lambda mod, inp, out, b=b: sizes.__setitem__(b, out[0, 0].numel()))
        for b in _blocks(g, d) if b.norm is not None]
    with torch.no_grad():
        g(X, training=False)
        d(X, g(X, training=False))
        for hk in hooks:
            hk.remove()
        for block in _blocks(g, d):
            conv, spec = block.conv, block.spec
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=conv.weight.dtype)
                              / fan_in ** 0.5)
            sign = torch.randint(0, 2, conv.bias.shape, generator=gen).to(conv.bias.dtype) * 2 - 1
            if spec.activation == "relu":
                sign = torch.ones_like(sign)
            conv.bias.zero_()
            if block.norm is not None:
                block.norm.weight.fill_(norm_scale)
                block.norm.bias.copy_(sign * norm_scale * (sizes[block] ** 0.5 + 1))
            elif spec.activation in ("relu", "lrelu"):
                conv.bias.copy_(sign * margin)
        Yhat = g(X, training=False)
    return Yhat - offset


def _kink_recorder(g, d):
    """Hooks that record the sign of every piecewise-linear input on each forward pass."""
    signs, hooks = [], []
    for block in _blocks(g, d):
        if block.spec.activation in ("relu", "lrelu"):
            target = block.norm if block.norm is not None else block.conv
            hooks.append(target.register_forward_hook(lambda mod, inp, out: signs.append(out > 0)))
    return signs, hooks


def gradient_check(g, d, X, Y, h=1e-3, floor=1e-5):
    """Compare autograd with central differences for every weight, per loss.

    Relative error is |a - n| / max(|a|, |n|, floor). The floor caps the
    absolute slack at floor * 1e-3 for coordinates whose gradient is near zero
    (conv biases cancelled by batch norm have a true gradient of exactly 0).
    Also counts perturbations that flip the sign of any activation input or of
    Yhat - Y (central differences are not valid across such a kink), and lists
    conv weight tensors whose analytic gradient is identically zero.
    """
    named = list(g.named_parameters(prefix="G")) + list(d.named_parameters(prefix="D"))
    params = [p for _, p in named]
    signs, hooks = _kink_recorder(g, d)

    def evaluate(which):
        signs.clear()
        lg, ld = losses_of(g, d, X, Y)
        pattern = [s.clone() for s in signs] + [g(X, training=False) > Y]
        return (lg, ld)[which], pattern

    report = {}
    try:
        for which, name in ((0, "generator"), (1, "discriminator")):
            for p in params:
                p.grad = None
            loss, base = evaluate(which)
            loss.backward()
            analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                        for p in params]
            dead = [n for (n, _), a in zip(named, analytic) if n.endswith("conv.weight") and not a.any()]
            err, worst, crossings, count = 0.0, "", 0, 0
            with torch.no_grad():
                for (pname, p), a in zip(named, analytic):
                    flat, aflat = p.view(-1), a.view(-1)
                    for i in range(flat.numel()):
                        orig = flat[i].item()
                        flat[i] = orig + h
                        fp, pat_p = evaluate(which)
                        flat[i] = orig - h
                        fm, pat_m = evaluate(which)
                        flat[i] = orig
                        crossings += any(not torch.equal(u, v) for pat in (pat_p, pat_m)
                                         for u, v in zip(pat, base))
                        num = (fp.item() - fm.item()) / (2 * h)
                        an = aflat[i].item()
                        rel = abs(an - num) / max(abs(an), abs(num), floor)
                        if rel > err:
                            err, worst = rel, f"{pname}[{i}] analytic={an:.3e} numeric={num:.3e}"
                        count += 1
            report[name] = {"max_rel_error": err, "worst": worst, "kink_crossings": crossings,
                            "dead_weight_tensors": dead, "weights": count}
    finally:
        for hk in hooks:
            hk.remove()
    return report
