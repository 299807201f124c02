"""Kink-aware central-difference probes of the style gradient."""

import numpy as np

from styledeid.synthesis import _forward, stack_noise, synthesize_with_grad

H = 1e-4


def _signs(g, s, noise):
    _, (caches, _) = _forward(g, s[None], noise, keep=True)
    return [np.signbit(c[0]) for c in caches]


def style_probes(g, s, nf, upstream, layer, n_probes, rng, h=H):
    """Relative errors |analytic - numeric| / (|analytic| + 1e-8) at random coordinates of ``layer``.

    A probe whose +-h perturbation flips any leaky-ReLU pre-activation sits on
    a kink, where central differences are meaningless; it is redrawn.
    """
    noise = stack_noise(nf, g.n_layers)
    _, backward = synthesize_with_grad(g, s[None], noise)
    analytic = backward(upstream[None])[0]

    def f(x):
        img, _ = _forward(g, x[None], noise, keep=False)
        return float((img[0] * upstream).sum())

    errs, tries = [], 0
    while len(errs) < n_probes:
        tries += 1
        if tries > 50 * n_probes:
            raise RuntimeError("could not find kink-free probes")
        j = int(rng.integers(s.shape[1]))
        sp, sm = s.copy(), s.copy()
        sp[layer, j] += h
        sm[layer, j] -= h
        if any((a != b).any() for a, b in zip(_signs(g, sp, noise), _signs(g, sm, noise))):
            continue
        num = (f(sp) - f(sm)) / (2 * h)
        a = analytic[layer, j]
        errs.append(abs(a - num) / (abs(a) + 1e-8))
    return np.array(errs)
