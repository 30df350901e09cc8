"""Comparison alignment losses operating on the same features as the IB loss.

MMD and the adversarial domain classifier work on video-level features; the
contrastive (InfoNCE) and VICReg variants work on projections and reuse the
label/pseudo-label pairing.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .errors import ShapeError
from .rng import Rng
from .tensor import Tensor

MMD_BANDWIDTH_FACTORS = (0.5, 1.0, 2.0, 4.0, 8.0)
VICREG_COEFFS = (25.0, 25.0, 1.0)


def _pairwise_sq_dists(x: Tensor) -> Tensor:
    n = x.shape[0]
    sq = tn.sum(tn.square(x), axis=1, keepdims=True)           # (n, 1)
    rows = tn.broadcast_to(sq, (n, n))
    cols = tn.transpose(rows)
    gram = tn.matmul(x, tn.transpose(x))
    return tn.sub(tn.add(rows, cols), tn.scale(gram, 2.0))


def median_bandwidth(x: np.ndarray) -> float:
    """Median squared distance over distinct pairs of rows (floored at 1e-12)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 2:
        return 1.0
    d = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    iu = np.triu_indices(n, 1)
    return max(float(np.median(d[iu])), 1e-12)


def mmd_loss(source_features: Tensor, target_features: Tensor,
             factors=MMD_BANDWIDTH_FACTORS, bandwidth: float | None = None) -> Tensor:
    """Biased multi-kernel RBF MMD^2.

    Kernel widths are ``factor * bandwidth``. By default the bandwidth is the
    median squared distance over the joint batch, treated as a constant.
    """
    source_features, target_features = tn.as_tensor(source_features), tn.as_tensor(target_features)
    ns, nt = source_features.shape[0], target_features.shape[0]
    if ns == 0 or nt == 0:
        raise ShapeError("mmd_loss needs non-empty batches")
    x = tn.concatenate([source_features, target_features], axis=0)
    d2 = _pairwise_sq_dists(x)
    bw = median_bandwidth(x.data) if bandwidth is None else float(bandwidth)
    k = None
    for f in factors:
        term = tn.exp(tn.scale(d2, -1.0 / (f * bw)))
        k = term if k is None else tn.add(k, term)
    kss = tn.mean(k[:ns, :ns])
    ktt = tn.mean(k[ns:, ns:])
    kst = tn.mean(k[:ns, ns:])
    return tn.sub(tn.add(kss, ktt), tn.scale(kst, 2.0))


# ---------------------------------------------------------------------------
# adversarial


class DomainClassifier:
    """Two-layer MLP emitting a single domain logit (1 = target)."""

    def __init__(self, in_dim: int, hidden: int, rng: Rng, dtype=np.float64, zero_init: bool = False):
        def w(name, shape):
            if zero_init:
                return np.zeros(shape, dtype=dtype)
            return rng.split(name).normal(shape, 1.0 / math.sqrt(shape[0]), dtype)

        self.params = {
            "domain_head.fc1.weight": Tensor(w("fc1", (in_dim, hidden)), requires_grad=True),
            "domain_head.fc1.bias": Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            "domain_head.fc2.weight": Tensor(w("fc2", (hidden, 1)), requires_grad=True),
            "domain_head.fc2.bias": Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        }

    def __call__(self, features: Tensor, detach_params: bool = False) -> Tensor:
        p = self.params
        if detach_params:
            p = {n: Tensor(t.data) for n, t in p.items()}
        h = tn.relu(tn.linear(features, p["domain_head.fc1.weight"], p["domain_head.fc1.bias"]))
        return tn.linear(h, p["domain_head.fc2.weight"], p["domain_head.fc2.bias"])


def binary_cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE of (N, 1) logits, computed as a two-way softmax against a zero logit."""
    n = logits.shape[0]
    two = tn.concatenate([Tensor(np.zeros((n, 1), dtype=logits.dtype)), logits], axis=1)
    return tn.cross_entropy(two, np.asarray(targets, dtype=np.int64))


def adversarial_losses(features: Tensor, domain_flags, classifier: DomainClassifier,
                       grl_scale: float) -> tuple[Tensor, Tensor]:
    """Return ``(domain_classifier_loss, feature_loss)``.

    Both carry the same BCE value. The first only reaches the classifier
    weights; the second only reaches ``features``, through a gradient reversal,
    so minimising it pushes the encoder to confuse the classifier.
    """
    flags = np.asarray(domain_flags, dtype=np.int64)
    clf_loss = binary_cross_entropy_logits(classifier(Tensor(features.data)), flags)
    feat_loss = binary_cross_entropy_logits(
        classifier(tn.grad_reverse(features, grl_scale), detach_params=True), flags)
    return clf_loss, feat_loss


def grl_ramp(progress: float, gamma: float = 10.0) -> float:
    """Sigmoid ramp 0 -> 1 used for the reversal scale over training progress in [0, 1]."""
    return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0


# ---------------------------------------------------------------------------
# maximum classifier discrepancy


def classifier_discrepancy(logits_a: Tensor, logits_b: Tensor) -> Tensor:
    """Mean over instances of the L1 distance between the two softmax outputs."""
    n = logits_a.shape[0]
    diff = tn.abs(tn.sub(tn.softmax(logits_a), tn.softmax(logits_b)))
    return tn.scale(tn.sum(diff), 1.0 / n)


# ---------------------------------------------------------------------------
# contrastive


def _l2_normalise(z: Tensor) -> Tensor:
    norm = tn.sqrt(tn.clamp_min(tn.sum(tn.square(z), axis=1, keepdims=True), 1e-24))
    return tn.div(z, tn.broadcast_to(norm, z.shape))


def infonce_cross_domain_loss(z_source: Tensor, labels, z_target: Tensor, pseudo_labels,
                              temperature: float = 0.1) -> Tensor:
    """Supervised-contrastive loss restricted to cross-domain candidates.

    Every source instance is an anchor whose candidates are all target
    instances, and vice versa; positives share a label/pseudo-label. Anchors
    without a positive are left out of the mean.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z_source, z_target = tn.as_tensor(z_source), tn.as_tensor(z_target)
    ls = np.asarray(labels, dtype=np.int64)
    lt = np.asarray(pseudo_labels, dtype=np.int64)
    pos = (ls[:, None] == lt[None, :]).astype(z_source.dtype)
    n_s, n_t = pos.sum(axis=1), pos.sum(axis=0)
    n_anchor = int((n_s > 0).sum() + (n_t > 0).sum())
    if n_anchor == 0:
        return Tensor(np.zeros((), dtype=z_source.dtype))

    sim = tn.scale(tn.matmul(_l2_normalise(z_source), tn.transpose(_l2_normalise(z_target))),
                   1.0 / temperature)
    w_s = pos / np.where(n_s > 0, n_s, 1.0)[:, None]
    w_t = (pos / np.where(n_t > 0, n_t, 1.0)[None, :]).T
    src_term = tn.sum(tn.mul(tn.log_softmax(sim), Tensor(w_s)))
    tgt_term = tn.sum(tn.mul(tn.log_softmax(tn.transpose(sim)), Tensor(w_t)))
    return tn.scale(tn.add(src_term, tgt_term), -1.0 / n_anchor)


def candidate_sets(n_source: int, n_target: int) -> list[tuple[str, int, list[tuple[str, int]]]]:
    """Enumerate (domain, anchor, candidates) as used by the contrastive loss."""
    out = [("source", i, [("target", j) for j in range(n_target)]) for i in range(n_source)]
    out += [("target", j, [("source", i) for i in range(n_source)]) for j in range(n_target)]
    return out


# ---------------------------------------------------------------------------
# VICReg


def _variance_covariance(z: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    b, d = z.shape
    zc = tn.sub(z, tn.broadcast_to(tn.mean(z, axis=0, keepdims=True), z.shape))
    var = tn.scale(tn.sum(tn.square(zc), axis=0), 1.0 / (b - 1))
    std = tn.sqrt(tn.add(var, eps))
    var_term = tn.sum(tn.relu(tn.sub(1.0, std)))
    cov = tn.scale(tn.matmul(tn.transpose(zc), zc), 1.0 / (b - 1))
    eye = Tensor(np.eye(d, dtype=z.dtype))
    off = tn.sub(tn.sum(tn.square(cov)), tn.sum(tn.square(tn.mul(cov, eye))))
    return var_term, tn.scale(off, 1.0 / d)


def vicreg_terms(z_a: Tensor, z_b: Tensor, eps: float = 1e-12) -> tuple[Tensor, Tensor, Tensor] | None:
    z_a, z_b = tn.as_tensor(z_a), tn.as_tensor(z_b)
    if z_a.shape != z_b.shape:
        raise ShapeError(f"vicreg: {z_a.shape} vs {z_b.shape}")
    if z_a.shape[0] < 2:
        return None
    inv = tn.mean(tn.square(tn.sub(z_a, z_b)))
    va, ca = _variance_covariance(z_a, eps)
    vb, cb = _variance_covariance(z_b, eps)
    return inv, tn.add(va, vb), tn.add(ca, cb)


def vicreg_cross_domain_loss(z_source_rows: Tensor, z_target_rows: Tensor,
                             coeffs=VICREG_COEFFS) -> Tensor | None:
    """Invariance + variance hinge + off-diagonal covariance on paired rows; None if B < 2."""
    terms = vicreg_terms(z_source_rows, z_target_rows)
    if terms is None:
        return None
    inv, var, cov = terms
    mi, mv, mc = coeffs
    return tn.add(tn.add(tn.scale(inv, mi), tn.scale(var, mv)), tn.scale(cov, mc))


def target_pseudo_ce(target_logits: Tensor, pseudo_labels, weight: float = 1.0) -> Tensor:
    return tn.scale(tn.cross_entropy(target_logits, pseudo_labels), weight)
