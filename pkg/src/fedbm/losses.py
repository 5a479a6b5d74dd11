"""Loss functions with hand-written gradients.

Every loss returns a :class:`LossValue` holding the scalar and a dict of
gradients keyed by input name.  Gradients are exact analytic expressions, not
autodiff output; the test suite checks each one against central finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .concept_space import (
    ConceptDistribution,
    DistributionClassifier,
    classifier_logits,
    classifier_logits_backward,
)

DIVERSITY_EPS = 1e-6


@dataclass
class LossValue:
    """Scalar loss plus gradients keyed by the name of the input they refer to."""

    value: float
    grads: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GeneratorLossConfig:
    """Weights for the combined generator objective."""

    lambda_div: float = 1.0
    lambda_dis: float = 0.1

    def __post_init__(self):
        for name in ("lambda_div", "lambda_dis"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _check_batch(features: np.ndarray, labels: np.ndarray, num_classes: int):
    h = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValueError(f"features must be a non-empty (B, D) array, got shape {h.shape}")
    if y.shape != (h.shape[0],):
        raise ValueError(f"labels must have shape ({h.shape[0]},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels out of range for {num_classes} classes")
    if not np.all(np.isfinite(h)):
        raise ValueError("features contain non-finite values")
    return h, y


def _log_softmax(logits: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - log_z


def surrogate_align_loss(
    features: np.ndarray, labels: np.ndarray, clf: DistributionClassifier
) -> LossValue:
    """Closed-form alignment loss against the frozen classifier.

    Per sample: cross-entropy over the classifier logits plus the penalty
    tau^2/2 * <h*h, var_y> for the true class.  With all variances zero this
    is plain cross-entropy over tau * H @ means.
    """
    h, y = _check_batch(features, labels, clf.num_classes)
    b = h.shape[0]
    tau = clf.temperature
    logits = classifier_logits(clf, h)
    log_p = _log_softmax(logits)
    ce = -log_p[np.arange(b), y]
    penalty = 0.5 * tau * tau * ((h * h) * clf.variances[:, y].T).sum(axis=1)
    value = float((ce + penalty).mean())

    softmax = np.exp(log_p)
    dlogits = softmax.copy()
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b
    dh = classifier_logits_backward(clf, h, dlogits)
    dh += (tau * tau / b) * h * clf.variances[:, y].T
    return LossValue(value=value, grads={"features": dh})


def monte_carlo_align_loss(
    features: np.ndarray,
    labels: np.ndarray,
    dists: list[ConceptDistribution],
    temperature: float,
    num_samples: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte-Carlo estimate of the sampled contrastive alignment objective.

    For sample i with label y, draws ``num_samples`` fresh embeddings per class
    from its Gaussian, forms n_k = mean_t exp(tau <h_i, e_t^(k)>) for each
    negative class, then averages -log(p_t / (p_t + sum_k n_k)) over positive
    draws p_t.  Returns (estimate, standard error); the standard error
    covers both the positive-draw scatter and the uncertainty of the
    negative-class means, which enter every term.  The draw order is fixed
    (sample index, then negative classes ascending, then the positive class),
    so one seed gives one estimate.
    """
    if num_samples < 100:
        raise ValueError(f"num_samples must be at least 100, got {num_samples}")
    h, y = _check_batch(features, labels, len(dists))
    tau = float(temperature)
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError(f"temperature must be positive and finite, got {tau}")
    b = h.shape[0]
    means = np.stack([d.mean for d in dists], axis=0)
    stds = np.sqrt(np.stack([d.var for d in dists], axis=0))

    per_sample = np.empty(b)
    per_sample_var = np.empty(b)
    for i in range(b):
        hi = h[i]
        neg_total = 0.0
        neg_var = 0.0
        for k in range(len(dists)):
            if k == y[i]:
                continue
            eps = rng.standard_normal((num_samples, means.shape[1]))
            draws = means[k] + stds[k] * eps
            sims = np.exp(tau * (draws @ hi))
            neg_total += float(sims.mean())
            neg_var += float(sims.var(ddof=1)) / num_samples
        eps = rng.standard_normal((num_samples, means.shape[1]))
        draws = means[y[i]] + stds[y[i]] * eps
        pos = np.exp(tau * (draws @ hi))
        terms = np.log1p(neg_total / pos)
        per_sample[i] = terms.mean()
        # the negative-class mean sits inside every term, so its sampling
        # noise shifts them together; propagate it with the delta method
        slope = float((1.0 / (pos + neg_total)).mean())
        per_sample_var[i] = terms.var(ddof=1) / num_samples + slope * slope * neg_var
    estimate = float(per_sample.mean())
    stderr = float(np.sqrt(per_sample_var.sum()) / b)
    return estimate, stderr


def contrastive_align_loss(
    features: np.ndarray, labels: np.ndarray, embeddings: np.ndarray, temperature: float
) -> LossValue:
    """Empirical contrastive alignment over the raw prompt embeddings.

    ``embeddings`` has shape (K, M, D).  For sample i with label y the loss is
    the average over the M positive prompts of -log(p_m / (p_m + N)), with
    p_m = exp(tau <h_i, e_m^(y)>) and N the sum over negative classes of the
    mean exp similarity to that class's prompts.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 3:
        raise ValueError(f"embeddings must be (K, M, D), got shape {emb.shape}")
    k_cls, m, d = emb.shape
    h, y = _check_batch(features, labels, k_cls)
    if h.shape[1] != d:
        raise ValueError(f"feature dim {h.shape[1]} does not match embedding dim {d}")
    tau = float(temperature)
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError(f"temperature must be positive and finite, got {tau}")
    b = h.shape[0]

    value = 0.0
    dh = np.zeros_like(h)
    for i in range(b):
        hi = h[i]
        sims = np.exp(tau * (emb @ hi))  # (K, M)
        pos = sims[y[i]]
        neg_mask = np.ones(k_cls, dtype=bool)
        neg_mask[y[i]] = False
        neg_total = sims[neg_mask].mean(axis=1).sum()
        value += float(np.log1p(neg_total / pos).mean())

        # d/dh of (1/M) sum_m [log(p_m + N) - log p_m]
        coef = pos / (pos + neg_total)  # p_m / (p_m + N)
        a = float((1.0 / (pos + neg_total)).mean())
        d_pos = (tau / m) * ((coef - 1.0)[:, None] * emb[y[i]]).sum(axis=0)
        d_neg = (
            a * (tau / m) * (sims[neg_mask][:, :, None] * emb[neg_mask]).sum(axis=(0, 1))
        )
        dh[i] = d_pos + d_neg
    value /= b
    dh /= b
    return LossValue(value=value, grads={"features": dh})


def semantic_loss(logits: np.ndarray, labels: np.ndarray) -> LossValue:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"logits must be a non-empty (B, K) array, got shape {z.shape}")
    _, y = _check_batch(z, labels, z.shape[1])
    b = z.shape[0]
    log_p = _log_softmax(z)
    value = float(-log_p[np.arange(b), y].mean())
    dlogits = np.exp(log_p)
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b
    return LossValue(value=value, grads={"logits": dlogits})


def diversity_loss(
    conditions: np.ndarray, outputs: np.ndarray, eps: float = DIVERSITY_EPS
) -> LossValue:
    """Ratio penalty pushing distinct conditions toward distinct outputs.

    Pairs row i with row (i+1) mod B and averages
    |z_i - z_j|_1 / (|x_i - x_j|_1 + eps).  Gradient is with respect to the
    outputs only; conditions are treated as fixed.
    """
    z = np.asarray(conditions, dtype=np.float64)
    x = np.asarray(outputs, dtype=np.float64)
    if z.ndim != 2 or x.ndim != 2 or z.shape[0] != x.shape[0]:
        raise ValueError(f"conditions {z.shape} and outputs {x.shape} must share a batch axis")
    if z.shape[0] < 2:
        raise ValueError("need at least 2 rows to form pairs")
    b = z.shape[0]
    zj = np.roll(z, -1, axis=0)
    xj = np.roll(x, -1, axis=0)
    num = np.abs(z - zj).sum(axis=1)
    den = np.abs(x - xj).sum(axis=1) + eps
    value = float((num / den).mean())

    s = np.sign(x - xj)
    coef = -num / (den * den) / b
    dx = coef[:, None] * s
    dx += np.roll(-coef[:, None] * s, 1, axis=0)
    return LossValue(value=value, grads={"outputs": dx})


def distribution_loss(batch_stats: list, running_stats: list) -> LossValue:
    """Sum over layers of ||mu_b - mu_r||_2 + ||var_b - var_r||_2.

    ``batch_stats`` and ``running_stats`` are parallel lists of (mean, var)
    pairs, one per normalization layer.  Gradients are with respect to the
    batch statistics.
    """
    if len(batch_stats) != len(running_stats):
        raise ValueError(
            f"{len(batch_stats)} batch-stat layers vs {len(running_stats)} running-stat layers"
        )
    if not batch_stats:
        raise ValueError("need at least one layer of statistics")
    value = 0.0
    d_means = []
    d_vars = []
    for idx, ((bm, bv), (rm, rv)) in enumerate(zip(batch_stats, running_stats)):
        bm = np.asarray(bm, dtype=np.float64)
        bv = np.asarray(bv, dtype=np.float64)
        rm = np.asarray(rm, dtype=np.float64)
        rv = np.asarray(rv, dtype=np.float64)
        if bm.shape != rm.shape or bv.shape != rv.shape:
            raise ValueError(f"stat shapes disagree at layer {idx}")
        dm = bm - rm
        dv = bv - rv
        nm = float(np.linalg.norm(dm))
        nv = float(np.linalg.norm(dv))
        value += nm + nv
        d_means.append(dm / nm if nm > 0 else np.zeros_like(dm))
        d_vars.append(dv / nv if nv > 0 else np.zeros_like(dv))
    return LossValue(value=value, grads={"batch_means": d_means, "batch_vars": d_vars})


def generator_loss(
    sem: LossValue, div: LossValue, dis: LossValue, cfg: GeneratorLossConfig
) -> LossValue:
    """Weighted sum sem + lambda_div * div + lambda_dis * dis with merged grads."""
    value = sem.value + cfg.lambda_div * div.value + cfg.lambda_dis * dis.value
    grads: dict = {}
    for part, weight in ((sem, 1.0), (div, cfg.lambda_div), (dis, cfg.lambda_dis)):
        for key, g in part.grads.items():
            if isinstance(g, list):
                scaled = [weight * gi for gi in g]
                if key in grads:
                    grads[key] = [a + b for a, b in zip(grads[key], scaled)]
                else:
                    grads[key] = scaled
            else:
                if key in grads:
                    grads[key] = grads[key] + weight * g
                else:
                    grads[key] = weight * g
    return LossValue(value=value, grads=grads)
