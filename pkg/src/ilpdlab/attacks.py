"""Constrained sign-gradient attacks: single-step and iterative baselines,
momentum iteration, the two-stage projection-maximizing intermediate-level
attack, the single-stage feature-decay attack, and the linear-backprop
variant.

All attacks run batched: x is (n, C, H, W), y is (n,) and every example
evolves independently (sign steps and clipping are elementwise), so the
batched run is bit-identical to n single-example runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .engine import (
    DTYPE,
    BackwardOverrides,
    NumericalError,
    ShapeError,
    softmax_cross_entropy,
)
from .network import Model, split


class AttackConfigError(ValueError):
    pass


@dataclass
class AttackConfig:
    """Knobs shared by the attack family.

    epsilon: max-norm pixel budget; eta: step size; steps: iterations.
    gamma >= 1 is the feature-decay factor, guide_steps the baseline run
    length for the two-stage attack, momentum_mu the momentum coefficient,
    noise_sigma the per-iteration Gaussian std on the benign reference.
    split is the layer position separating the feature extractor from the
    head; linbp_from the first layer whose masks go linear.
    """

    epsilon: float = 8 / 255
    eta: float = 1 / 255
    steps: int = 100
    gamma: float = 1.0
    guide_steps: int = 10
    momentum_mu: float = 0.0
    noise_sigma: float = 0.0
    split: int | None = None
    linbp_from: int | None = None
    method: str = "ifgsm"
    seed: int = 0
    record_points: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise AttackConfigError("epsilon must be positive")
        if self.eta <= 0:
            raise AttackConfigError("eta must be positive")
        if self.steps < 0:
            raise AttackConfigError("steps must be nonnegative")
        if self.gamma < 1:
            raise AttackConfigError("gamma must be at least 1")
        if self.guide_steps < 0:
            raise AttackConfigError("guide_steps must be nonnegative")
        if self.momentum_mu < 0:
            raise AttackConfigError("momentum_mu must be nonnegative")
        if self.noise_sigma < 0:
            raise AttackConfigError("noise_sigma must be nonnegative")


@dataclass
class AttackTrace:
    """Per-iteration scalars, one row per recorded iterate (0..steps)."""

    loss: list = field(default_factory=list)  # each entry: (n,) array
    feature_norm: list = field(default_factory=list)
    projection: list = field(default_factory=list)
    cosine: list = field(default_factory=list)
    points: list = field(default_factory=list)  # deltas, only if requested


@dataclass
class AttackResult:
    delta: np.ndarray
    trace: AttackTrace

    def adversarial(self, x):
        return x + self.delta


@dataclass
class DirectionalGuide:
    """Feature-space direction from a u-step baseline run, plus the benign
    feature point it starts from."""

    v: np.ndarray
    origin: np.ndarray


def project_and_clip(x, delta, epsilon):
    """Clamp delta into the max-norm ball, then further so x + delta stays
    a valid image.  Order is fixed (ball first, pixels second) so results
    are bit-reproducible; the pair is idempotent."""
    if x.shape != delta.shape:
        raise ShapeError(f"x {x.shape} vs delta {delta.shape}")
    d = np.clip(delta, -DTYPE(epsilon), DTYPE(epsilon))
    return np.clip(x + d, DTYPE(0.0), DTYPE(1.0)) - x


def _check_finite(arr, what, step):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what} at step {step}")


def _benign_noise(x, sigma, seed, indices, iteration):
    """Gaussian jitter on the benign example, drawn from a counter-based
    generator keyed by (seed, example index, iteration) so results do not
    depend on batch composition or execution order."""
    if sigma == 0:
        return x
    out = np.empty_like(x)
    for row, ex in enumerate(indices):
        key = np.array([seed, (int(ex) << 20) + iteration], dtype=np.uint64)
        g = np.random.Generator(np.random.Philox(key=key))
        out[row] = x[row] + g.standard_normal(x.shape[1:], dtype=np.float32) * DTYPE(sigma)
    return out


def _run_sign_loop(x, cfg, grad_fn):
    """Shared iteration: per-step gradient from grad_fn(delta, j), optional
    momentum accumulation, sign step, projection.  Records the trace row
    for Delta x_j at every j in 0..steps."""
    x = np.asarray(x, dtype=DTYPE)
    delta = np.zeros_like(x)
    trace = AttackTrace()
    if cfg.steps == 0:
        return AttackResult(delta=delta, trace=trace)
    mom = np.zeros_like(x)
    axes = tuple(range(1, x.ndim))
    for j in range(cfg.steps):
        grad = grad_fn(delta, j, trace)
        _check_finite(grad, "gradient", j)
        if cfg.momentum_mu > 0:
            l1 = np.abs(grad).sum(axis=axes, keepdims=True)
            normed = np.where(l1 < 1e-12, grad, grad / np.maximum(l1, DTYPE(1e-30)))
            mom = DTYPE(cfg.momentum_mu) * mom + normed
            step_dir = np.sign(mom)
        else:
            step_dir = np.sign(grad)
        if cfg.record_points:
            trace.points.append(delta.copy())
        delta = project_and_clip(x, delta + DTYPE(cfg.eta) * step_dir, cfg.epsilon)
    grad_fn(delta, cfg.steps, trace)  # final trace row, gradient unused
    if cfg.record_points:
        trace.points.append(delta.copy())
    return AttackResult(delta=delta, trace=trace)


# ---------------------------------------------------------------------------
# attacks


def fgsm(model: Model, x, y, epsilon):
    """Single sign step of the loss gradient, clipped to valid pixels."""
    x = np.asarray(x, dtype=DTYPE)
    loss, grad, _, _ = model.loss_and_input_grad(x, y)
    _check_finite(grad, "gradient", 0)
    delta = project_and_clip(x, DTYPE(epsilon) * np.sign(grad), epsilon)
    trace = AttackTrace(loss=[loss])
    return AttackResult(delta=delta, trace=trace)


def _feature_norm(h, x, delta):
    z0 = h.forward(x)
    z1 = h.forward(x + delta)
    axes = tuple(range(1, z0.ndim))
    return np.sqrt(((z1 - z0) ** 2).sum(axis=axes))


def ifgsm(model: Model, x, y, cfg: AttackConfig, overrides_fn=None):
    """Iterative sign-gradient attack; the loss trace holds the substitute
    loss at every iterate.  overrides_fn(delta, j) may supply backward
    overrides for each step (used by the linear-backprop and replacement
    variants)."""
    x = np.asarray(x, dtype=DTYPE)
    h = model.split(cfg.split)[0] if cfg.split is not None else None

    def grad_fn(delta, j, trace):
        ov = overrides_fn(delta, j) if overrides_fn is not None else None
        loss, grad, _, _ = model.loss_and_input_grad(x + delta, y, overrides=ov)
        trace.loss.append(loss)
        if h is not None:
            trace.feature_norm.append(_feature_norm(h, x, delta))
        return grad

    return _run_sign_loop(x, cfg, grad_fn)


def mifgsm(model: Model, x, y, cfg: AttackConfig):
    """Momentum iteration: accumulate L1-normalized gradients, step on the
    sign of the accumulator.  The accumulation itself lives in the shared
    loop; mu = 0 skips it entirely, so the reduction to the plain iterative
    attack is bit-exact."""
    return ifgsm(model, x, y, cfg)


def compute_guide(model: Model, x, y, cfg: AttackConfig) -> DirectionalGuide:
    """Directional guide: feature displacement of a guide_steps baseline
    run at the split layer."""
    if cfg.split is None:
        raise AttackConfigError("a split position is required for a guide")
    x = np.asarray(x, dtype=DTYPE)
    h, _ = model.split(cfg.split)
    origin = h.forward(x)
    if cfg.guide_steps == 0:
        return DirectionalGuide(v=np.zeros_like(origin), origin=origin)
    base_cfg = replace(cfg, steps=cfg.guide_steps, momentum_mu=0.0, record_points=False)
    res = ifgsm(model, x, y, base_cfg)
    v = h.forward(x + res.delta) - origin
    return DirectionalGuide(v=v, origin=origin)


def ila(model: Model, x, y, guide: DirectionalGuide, cfg: AttackConfig):
    """Maximize the scalar projection of the feature displacement onto the
    guide with sign steps.  Trace records the objective value, the scalar
    projection, and the cosine to the guide."""
    if cfg.split is None:
        raise AttackConfigError("a split position is required")
    axes_of = lambda z: tuple(range(1, z.ndim))
    vnorm = np.sqrt((guide.v**2).sum(axis=axes_of(guide.v)))
    if np.any(vnorm < 1e-12):
        raise AttackConfigError("zero directional guide")
    x = np.asarray(x, dtype=DTYPE)
    h, _ = model.split(cfg.split)

    def grad_fn(delta, j, trace):
        z, rec = h.forward(x + delta, record=True)
        disp = z - guide.origin
        axes = axes_of(disp)
        obj = (guide.v * disp).sum(axis=axes)
        dnorm = np.sqrt((disp**2).sum(axis=axes))
        trace.loss.append(obj)
        trace.feature_norm.append(dnorm)
        trace.projection.append(obj / vnorm)
        trace.cosine.append(np.where(dnorm < 1e-12, 0.0, obj / (vnorm * np.maximum(dnorm, 1e-30))))
        grad, _ = h.backward(rec, guide.v)
        return grad

    return _run_sign_loop(x, cfg, grad_fn)


def mix_features(z_adv, z_benign, gamma):
    """Decayed feature point: (1/gamma) adversarial + (1 - 1/gamma) benign.
    gamma == 1 returns the adversarial features unchanged (bit-exact)."""
    if z_adv.shape != z_benign.shape:
        raise ShapeError(f"feature shapes differ: {z_adv.shape} vs {z_benign.shape}")
    if gamma < 1:
        raise AttackConfigError("gamma must be at least 1")
    if gamma == 1:
        return z_adv
    inv = DTYPE(1.0 / gamma)
    return inv * z_adv + (DTYPE(1.0) - inv) * z_benign


def ilpd(model: Model, x, y, cfg: AttackConfig):
    """Single-stage feature-decay attack.

    Each step mixes the adversarial features toward the (optionally
    noise-jittered) benign features by 1/gamma, takes the head loss there,
    and backpropagates through the mixing into the feature extractor.
    With gamma = 1 and sigma = 0 this is bit-identical to the plain
    iterative attack.  Trace rows carry the full-model substitute loss,
    the decayed-head loss, and the feature displacement norm.
    """
    if cfg.split is None:
        raise AttackConfigError("a split position is required")
    x = np.asarray(x, dtype=DTYPE)
    h, g = model.split(cfg.split)
    z_clean = h.forward(x)
    axes = tuple(range(1, z_clean.ndim))

    def grad_fn(delta, j, trace):
        grad, head_loss, z_adv = _ilpd_step(h, g, x, y, delta, cfg, j, z_clean)
        if cfg.gamma == 1:
            full_loss = head_loss
        else:
            full_loss, _ = softmax_cross_entropy(g.forward(z_adv), y)
        trace.loss.append(full_loss)
        trace.projection.append(head_loss)  # decayed-head loss column
        trace.feature_norm.append(np.sqrt(((z_adv - z_clean) ** 2).sum(axis=axes)))
        return grad

    return _run_sign_loop(x, cfg, grad_fn)


def _ilpd_step(h, g, x, y, delta, cfg: AttackConfig, j, z_clean):
    """One decayed-objective gradient evaluation; returns
    (input gradient, decayed-head loss, adversarial features)."""
    z_adv, rec_h = h.forward(x + delta, record=True)
    if cfg.noise_sigma == 0:
        z_benign = z_clean
    else:
        indices = np.arange(x.shape[0])
        xb = _benign_noise(x, cfg.noise_sigma, cfg.seed, indices, j)
        z_benign = h.forward(xb)
    z_mix = mix_features(z_adv, z_benign, cfg.gamma)
    logits, rec_g = g.forward(z_mix, record=True)
    head_loss, logit_grad = softmax_cross_entropy(logits, y)
    grad_z, _ = g.backward(rec_g, logit_grad)
    if cfg.gamma != 1:
        grad_z = grad_z * DTYPE(1.0 / cfg.gamma)
    grad, _ = h.backward(rec_h, grad_z)
    return grad, head_loss, z_adv


def ilpd_gradient(model: Model, x, y, delta, cfg: AttackConfig, iteration):
    """The input gradient the decay attack would use at a given iterate."""
    if cfg.split is None:
        raise AttackConfigError("a split position is required")
    x = np.asarray(x, dtype=DTYPE)
    h, g = model.split(cfg.split)
    z_clean = h.forward(x)
    grad, _, _ = _ilpd_step(h, g, x, y, delta, cfg, iteration, z_clean)
    return grad


def linbp_ifgsm(model: Model, x, y, cfg: AttackConfig, linear_from: int):
    """Iterative attack whose backward pass treats every ReLU/pool mask at
    layer >= linear_from as identity."""
    if linear_from < 0:
        raise AttackConfigError(f"invalid layer index {linear_from}")
    ov = BackwardOverrides(identity_from=linear_from)
    return ifgsm(model, x, y, cfg, overrides_fn=lambda delta, j: ov)


def with_momentum(attack_fn, mu):
    """Wrap an attack so its per-step gradients are accumulated with
    momentum coefficient mu before the sign step."""

    def wrapped(model, x, y, cfg, *args, **kwargs):
        return attack_fn(model, x, y, replace(cfg, momentum_mu=mu), *args, **kwargs)

    return wrapped


def with_benign_noise(attack_fn, sigma):
    """Wrap an attack so the benign feature reference is jittered with
    Gaussian noise of std sigma at every iteration."""

    def wrapped(model, x, y, cfg, *args, **kwargs):
        return attack_fn(model, x, y, replace(cfg, noise_sigma=sigma), *args, **kwargs)

    return wrapped


def run_attack(model: Model, x, y, cfg: AttackConfig):
    """Dispatch on cfg.method; the harness entry point."""
    if cfg.method == "fgsm":
        return fgsm(model, x, y, cfg.epsilon)
    if cfg.method == "ifgsm":
        return ifgsm(model, x, y, cfg)
    if cfg.method == "mifgsm":
        return mifgsm(model, x, y, cfg)
    if cfg.method == "ila":
        guide = compute_guide(model, x, y, cfg)
        return ila(model, x, y, guide, cfg)
    if cfg.method == "ilpd":
        return ilpd(model, x, y, cfg)
    if cfg.method == "linbp":
        if cfg.linbp_from is None:
            raise AttackConfigError("linbp needs linbp_from")
        return linbp_ifgsm(model, x, y, cfg, cfg.linbp_from)
    raise AttackConfigError(f"unknown attack method {cfg.method!r}")
