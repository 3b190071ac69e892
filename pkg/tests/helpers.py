"""Shared builders for small models and datasets."""

import numpy as np

from blendfuse.data import SyntheticConfig, generate_synthetic
from blendfuse.model import FusionModel, ModelConfig
from blendfuse.numerics import make_rng
from blendfuse.training import Arrays, LossWeights
from blendfuse.training.losses import domain_loss_grad, presence_loss_grad, salience_loss_grad

SMALL = dict(proj_dim=5, shared_dim=7, gate_hidden=4, head_hidden=6, domain_hidden=3)


def small_model(M=3, d=8, C=3, n=2, uda=False, seed=0, **kw):
    cfg = ModelConfig(input_dims=[d] * M, num_classes=C, top_n=n, uda=uda, **{**SMALL, **kw})
    return FusionModel(cfg, seed=seed)


def random_batch(model, B=6, seed=0):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=(B, d)) for d in model.cfg.input_dims]
    t = rng.dirichlet(np.ones(model.cfg.num_classes), size=B)
    return xs, t


def objective(model, xs, t, k=None, seed=1, weights=LossWeights(), with_domain=False, mode="train", grl_weight=None):
    """Full training objective with fixed dropout draws; returns a closure for grad_check.

    The reversal layer turns the domain term into a pseudo-gradient upstream of
    h; pass ``grl_weight=-1`` to make it the identity so the backward pass is
    the true gradient of the returned loss.
    """
    B = xs[0].shape[0]
    k = B if k is None else k

    def fn():
        res = model.forward(xs, mode, make_rng(seed, 0), n_labeled=k, aux_rng=make_rng(seed, 1),
                            with_domain=with_domain)
        lp, gp = presence_loss_grad(res.z_p[:k], t[:k], "soft_ce")
        ls, gs = salience_loss_grad(res.z_s[:k], t[:k])
        d_zp = np.zeros_like(res.z_p)
        d_zs = np.zeros_like(res.z_s)
        d_zp[:k] = weights.lambda_p * gp
        d_zs[:k] = weights.lambda_s * gs
        loss = weights.lambda_p * lp + weights.lambda_s * ls
        d_zd = None
        if with_domain:
            d = np.r_[np.zeros(k, dtype=int), np.ones(B - k, dtype=int)]
            ld, gd = domain_loss_grad(res.z_d, d)
            loss += weights.lambda_d * ld
            d_zd = weights.lambda_d * gd
        model.backward(d_zp, d_zs, d_zd, grl_weight)
        return loss

    return fn


def synth_arrays(seed=0, **kw):
    cfg = SyntheticConfig(seed=seed, **kw)
    samples = generate_synthetic(cfg)
    return cfg, samples, cfg.encoder_specs()


def source_arrays(samples, specs):
    return Arrays.from_samples([s for s in samples if s.domain == "source"], specs)


def fd_margin(model) -> float:
    """Distance of the cached forward pass from any ReLU kink or top-n tie.

    Central differences are only meaningful when every pre-activation and the
    gap between the n-th and (n+1)-th gate weight stay clear of zero by more
    than the probe step.
    """
    acts = [blk.relu._x for blk in model.projections]
    acts += [model.shared.relu._x, model.presence_head.act._x, model.salience_head.act._x]
    if model.gate is not None:
        acts.append(model.gate.act._x)
    if model.domain_head is not None and model._cache.z_d is not None:
        acts.append(model.domain_head.act._x)
    margin = min(float(np.abs(a).min()) for a in acts)
    n, M = model.cfg.top_n, model.cfg.num_encoders
    if n < M:
        w = -np.sort(-model._cache.w, axis=1)
        margin = min(margin, float((w[:, n - 1] - w[:, n]).min()))
    return margin


def clear_batch(model, B=6, need=1e-3, **obj_kw):
    """First data seed whose batch sits ``need`` away from kinks and ties."""
    for seed in range(200):
        xs, t = random_batch(model, B=B, seed=seed)
        fn = objective(model, xs, t, **obj_kw)
        fn()
        if fd_margin(model) > need:
            return xs, t, fn
    raise RuntimeError("no kink-free batch found")


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, detail: str) -> bool:
    """Print and remember one pass/fail line; the terminal summary repeats them."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok
