"""Analysis instruments: input-gradient factorization, cross-model
mask/logit-gradient replacement, gradient-alignment trajectories, the
feature-space loss surface, and sweep tables.

Everything here is read-only over immutable models and emits plot-ready
flat rows.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attacks import (
    AttackConfig,
    AttackConfigError,
    DirectionalGuide,
    compute_guide,
    ifgsm,
    ila,
    ilpd,
    ilpd_gradient,
)
from .engine import BackwardOverrides, ShapeError, softmax_cross_entropy
from .network import Model


def gradient_cosine(grad_a, grad_b):
    """Cosine similarity of two same-shaped gradients; 0 for a degenerate
    (near-zero) side."""
    if grad_a.shape != grad_b.shape:
        raise ShapeError(f"gradient shapes differ: {grad_a.shape} vs {grad_b.shape}")
    a = np.asarray(grad_a, dtype=np.float64).ravel()
    b = np.asarray(grad_b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass
class GradientFactors:
    """The three backward factors at one point, in applied form.

    logit_grad is the loss gradient at the logits; apply_head maps a logit
    cotangent back to the split layer (weights and activation masks of the
    head); apply_features maps a split-layer cotangent to the input.
    product is apply_features(apply_head(logit_grad)).
    """

    logit_grad: np.ndarray
    apply_head: callable
    apply_features: callable
    head_applied: np.ndarray
    product: np.ndarray


def decompose_input_gradient(model: Model, x, y, beta) -> GradientFactors:
    """Split the input gradient into its three chain-rule factors at the
    feature/head boundary and return them in vector-product form."""
    h, g = model.split(beta)
    z, rec_h = h.forward(x, record=True)
    logits, rec_g = g.forward(z, record=True)
    _, logit_grad = softmax_cross_entropy(logits, y)

    def apply_head(cotangent):
        grad_z, _ = g.backward(rec_g, cotangent)
        return grad_z

    def apply_features(cotangent):
        grad_x, _ = h.backward(rec_h, cotangent)
        return grad_x

    head_applied = apply_head(logit_grad)
    return GradientFactors(
        logit_grad=logit_grad,
        apply_head=apply_head,
        apply_features=apply_features,
        head_applied=head_applied,
        product=apply_features(head_applied),
    )


def replacement_attack(substitute: Model, victim: Model, x, y, cfg: AttackConfig,
                       replace_masks=False, replace_logit_grad=False):
    """Iterative attack on the substitute where each backward pass may use
    the victim's activation masks and/or logit gradient, obtained from a
    victim forward pass at the same adversarial point.  Mask replacement
    only touches head layers (index >= cfg.split): the three-factor view
    leaves the feature extractor's own backward pass alone.  Requires
    identical architectures so mask shapes line up."""
    if substitute.spec.layers != victim.spec.layers:
        raise ShapeError("substitute and victim architectures differ")
    if replace_masks and cfg.split is None:
        raise AttackConfigError("mask replacement needs a split position")
    x = np.asarray(x, dtype=np.float32)

    def overrides_fn(delta, j):
        if not (replace_masks or replace_logit_grad):
            return None
        logits, rec = victim.forward(x + delta, record=True)
        ov = BackwardOverrides()
        if replace_masks:
            ov.masks = {i: m for i, m in rec.masks.items() if i >= cfg.split}
        if replace_logit_grad:
            _, lg = softmax_cross_entropy(logits, y)
            ov.logit_grad = lg
        return ov

    return ifgsm(substitute, x, y, cfg, overrides_fn=overrides_fn)


def alignment_trajectory(substitute: Model, victim: Model, result, x, y,
                         cfg: AttackConfig | None = None):
    """Per-iteration cosine between the substitute-side gradient and the
    victim's input gradient, evaluated at the attack's recorded iterates.
    When cfg describes a decay attack the substitute side is the gradient
    that attack actually steps on; otherwise it is the plain substitute
    input gradient.  Returns a list of (iteration, mean cosine)."""
    if not result.trace.points:
        raise ValueError("attack result carries no recorded iterates; "
                         "run it with record_points=True")
    x = np.asarray(x, dtype=np.float32)
    decayed = cfg is not None and cfg.method == "ilpd"
    series = []
    for j, delta in enumerate(result.trace.points):
        if decayed:
            gs = ilpd_gradient(substitute, x, y, delta, cfg, j)
        else:
            _, gs, _, _ = substitute.loss_and_input_grad(x + delta, y)
        _, gv, _, _ = victim.loss_and_input_grad(x + delta, y)
        cos = [gradient_cosine(gs[i], gv[i]) for i in range(x.shape[0])]
        series.append((j, float(np.mean(cos))))
    return series


@dataclass
class LossSurface:
    projections: np.ndarray
    cosines: np.ndarray
    substitute_loss: np.ndarray  # (len(projections), len(cosines))
    victim_loss: np.ndarray
    measured_projection: np.ndarray
    measured_cosine: np.ndarray


def _unit(v):
    return v / np.linalg.norm(v)


def loss_surface_sweep(substitute: Model, victim: Model, x, y,
                       guide: DirectionalGuide, projections, cosines, beta, seed=0):
    """Loss grids over feature perturbations with prescribed scalar
    projection onto the guide and cosine to it.

    delta = a * v_hat + a * tan(arccos c) * u_hat with u_hat a seeded random
    unit direction orthogonal to the guide, drawn once and reused across
    the whole grid.  Both models must share the feature extractor so the
    grids live over the same feature point.
    """
    h_s, g_s = substitute.split(beta)
    h_v, g_v = victim.split(beta)
    x = np.asarray(x, dtype=np.float32)
    v = np.asarray(guide.v, dtype=np.float64).ravel()
    vn = np.linalg.norm(v)
    if vn < 1e-12:
        raise AttackConfigError("degenerate directional guide")
    cosines = np.asarray(cosines, dtype=np.float64)
    projections = np.asarray(projections, dtype=np.float64)
    if np.any(cosines <= 0) or np.any(cosines > 1):
        raise AttackConfigError("cosines must lie in (0, 1]")
    vhat = v / vn
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(v.size)
    u -= (u @ vhat) * vhat
    uhat = _unit(u)
    z0 = h_s.forward(x).astype(np.float64)
    fshape = z0.shape[1:]
    nlp, nlc = len(projections), len(cosines)
    sub_loss = np.zeros((nlp, nlc))
    vic_loss = np.zeros((nlp, nlc))
    mproj = np.zeros((nlp, nlc))
    mcos = np.zeros((nlp, nlc))
    yi = int(np.atleast_1d(y)[0])
    for ai, a in enumerate(projections):
        for ci, c in enumerate(cosines):
            ortho = a * np.tan(np.arccos(c))
            delta = (a * vhat + ortho * uhat).astype(np.float32).astype(np.float64)
            mproj[ai, ci] = delta @ vhat
            dn = np.linalg.norm(delta)
            mcos[ai, ci] = (delta @ vhat) / dn if dn > 0 else 1.0 if a == 0 else 0.0
            z = (z0[0].ravel() + delta).astype(np.float32).reshape((1,) + fshape)
            ls, _ = softmax_cross_entropy(g_s.forward(z), [yi])
            lv, _ = softmax_cross_entropy(g_v.forward(z), [yi])
            sub_loss[ai, ci] = ls[0]
            vic_loss[ai, ci] = lv[0]
    return LossSurface(projections, cosines, sub_loss, vic_loss, mproj, mcos)


@dataclass
class MagnitudeScanRow:
    gamma: float
    feature_norm: float
    victim_loss: float
    substitute_loss: float
    amplified: list  # (scale, victim loss) along this run's final direction


def _victim_loss_along(victim: Model, beta, z0, direction, scales, y):
    h_v, g_v = victim.split(beta)
    out = []
    for s in scales:
        z = (z0 + s * direction).astype(np.float32)
        lv, _ = softmax_cross_entropy(g_v.forward(z), y)
        out.append((float(s), float(lv.mean())))
    return out


def ilpd_vs_ila_scan(substitute: Model, victim: Model, x, y, gammas, cfg: AttackConfig,
                     amplify_scales=(0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0)):
    """Feature-displacement magnitude vs victim loss, per gamma, with the
    two-stage projection attack as the reference point.  Also evaluates the
    victim loss along each run's final feature direction at several
    amplification scales."""
    x = np.asarray(x, dtype=np.float32)
    h_s, _ = substitute.split(cfg.split)
    z0 = h_s.forward(x)
    rows = []
    for gamma in gammas:
        res = ilpd(substitute, x, y, replace(cfg, gamma=float(gamma), method="ilpd"))
        z_adv = h_s.forward(x + res.delta)
        disp = z_adv - z0
        fnorm = float(np.sqrt((disp**2).sum(axis=tuple(range(1, disp.ndim)))).mean())
        lv, _ = softmax_cross_entropy(victim.forward(x + res.delta), y)
        ls, _ = softmax_cross_entropy(substitute.forward(x + res.delta), y)
        rows.append(MagnitudeScanRow(
            gamma=float(gamma),
            feature_norm=fnorm,
            victim_loss=float(lv.mean()),
            substitute_loss=float(ls.mean()),
            amplified=_victim_loss_along(victim, cfg.split, z0, disp, amplify_scales, y),
        ))
    guide = compute_guide(substitute, x, y, cfg)
    res = ila(substitute, x, y, guide, cfg)
    z_adv = h_s.forward(x + res.delta)
    disp = z_adv - z0
    lv, _ = softmax_cross_entropy(victim.forward(x + res.delta), y)
    ls, _ = softmax_cross_entropy(substitute.forward(x + res.delta), y)
    reference = MagnitudeScanRow(
        gamma=float("nan"),
        feature_norm=float(np.sqrt((disp**2).sum(axis=tuple(range(1, disp.ndim)))).mean()),
        victim_loss=float(lv.mean()),
        substitute_loss=float(ls.mean()),
        amplified=_victim_loss_along(victim, cfg.split, z0, disp, amplify_scales, y),
    )
    return rows, reference


def gamma_sweep(substitute: Model, victims, dataset, gammas, cfg: AttackConfig):
    """Average victim success rate per decay factor.  Rows:
    (gamma, per-victim rates, average)."""
    from .harness import transfer_eval

    rows = []
    for gamma in gammas:
        g = float(gamma)
        report = transfer_eval(substitute, victims, dataset, replace(cfg, gamma=g, method="ilpd"))
        rows.append((g, report.per_victim_rate, report.average_rate))
    return rows


def position_sweep(substitute: Model, victims, dataset, betas, cfg: AttackConfig):
    """Average victim success rate per split position."""
    from .harness import transfer_eval

    rows = []
    for beta in betas:
        report = transfer_eval(substitute, victims, dataset, replace(cfg, split=int(beta)))
        rows.append((int(beta), report.per_victim_rate, report.average_rate))
    return rows
