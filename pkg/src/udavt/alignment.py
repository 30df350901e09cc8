"""Cross-domain alignment through a redundancy-reduction cross-correlation loss.

Source projections are paired with every target projection whose pseudo-label
equals the source label. The paired rows feed a feature-by-feature normalised
cross-correlation matrix, and the loss pushes its diagonal to one and its
off-diagonal entries to zero.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ShapeError
from .rng import Rng
from .tensor import Tensor

DENOM_FLOOR = 1e-12


def pseudo_label(target_logits) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class (lowest index on ties) and its softmax probability per row."""
    logits = np.asarray(target_logits.data if isinstance(target_logits, Tensor) else target_logits,
                        dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    labels = np.argmax(logits, axis=1)
    return labels, p[np.arange(len(labels)), labels]


@dataclass
class QueueEntry:
    z: np.ndarray
    label: int
    epoch_tag: int


class FeatureQueue:
    """Fixed-capacity FIFO of detached source projections and their labels."""

    def __init__(self, capacity: int, max_age: int | None = None):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.max_age = max_age
        self._entries: deque[QueueEntry] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, z_batch, labels, epoch_tag: int = 0) -> None:
        z = np.array(z_batch.data if isinstance(z_batch, Tensor) else z_batch, copy=True)
        for row, lab in zip(z, np.asarray(labels)):
            self._entries.append(QueueEntry(row, int(lab), int(epoch_tag)))
        while len(self._entries) > self.capacity:
            self._entries.popleft()

    def evict_stale(self, current_epoch: int) -> None:
        if self.max_age is None:
            return
        while self._entries and current_epoch - self._entries[0].epoch_tag > self.max_age:
            self._entries.popleft()

    def vectors(self, dim: int | None = None, dtype=np.float64) -> np.ndarray:
        if not self._entries:
            return np.zeros((0, dim or 0), dtype=dtype)
        return np.stack([e.z for e in self._entries]).astype(dtype, copy=False)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self._entries], dtype=np.int64)


def queue_push(q: FeatureQueue, z_batch, labels, epoch_tag: int = 0) -> FeatureQueue:
    q.push(z_batch, labels, epoch_tag)
    return q


@dataclass
class PairIndex:
    """Parallel arrays of (source slot, target slot).

    Source slots below ``n_batch_sources`` index the in-batch sources; the
    rest index the queue, offset by ``n_batch_sources``.
    """

    source: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    target: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    n_batch_sources: int = 0

    def __len__(self) -> int:
        return len(self.source)

    def as_list(self) -> list[tuple[int, int]]:
        return list(zip(self.source.tolist(), self.target.tolist()))


def build_pairs(source_labels, target_pseudo_labels, queue_labels=None) -> PairIndex:
    """All (source, target) combinations whose labels agree.

    Ordering is source-major: batch sources first, then queue sources, and
    targets ascending inside each source.
    """
    src = np.asarray(source_labels, dtype=np.int64).reshape(-1)
    nb = len(src)
    if queue_labels is not None and len(queue_labels):
        src = np.concatenate([src, np.asarray(queue_labels, dtype=np.int64)])
    tgt = np.asarray(target_pseudo_labels, dtype=np.int64).reshape(-1)
    s_idx, t_idx = np.nonzero(src[:, None] == tgt[None, :])
    return PairIndex(s_idx.astype(np.int64), t_idx.astype(np.int64), nb)


def cap_pairs(pairs: PairIndex, cap: int, rng: Rng) -> PairIndex:
    """Uniformly subsample to at most ``cap`` pairs, keeping the original order."""
    if len(pairs) <= cap:
        return pairs
    keep = np.sort(rng.choice(len(pairs), cap, replace=False))
    return PairIndex(pairs.source[keep], pairs.target[keep], pairs.n_batch_sources)


def cross_correlation(z_source: Tensor, z_target: Tensor) -> Tensor | None:
    """Normalised cross-correlation between the columns of two (B, d) row sets.

    Each side is mean-centred per feature over the B rows. Returns ``None``
    when B < 2, which callers treat as "skip the alignment term".
    """
    z_source, z_target = tn.as_tensor(z_source), tn.as_tensor(z_target)
    if z_source.shape != z_target.shape:
        raise ShapeError(f"cross_correlation: {z_source.shape} vs {z_target.shape}")
    b, d = z_source.shape
    if b < 2:
        return None

    def centre(z):
        mu = tn.mean(z, axis=0, keepdims=True)
        return tn.sub(z, tn.broadcast_to(mu, z.shape))

    a, c = centre(z_source), centre(z_target)
    num = tn.matmul(tn.transpose(a), c)
    na = tn.sqrt(tn.sum(tn.square(a), axis=0, keepdims=True))
    nc = tn.sqrt(tn.sum(tn.square(c), axis=0, keepdims=True))
    denom = tn.clamp_min(tn.matmul(tn.transpose(na), nc), DENOM_FLOOR)
    return tn.div(num, denom)


def ib_loss(c: Tensor, lam: float = 5e-3) -> Tensor:
    """sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    d = c.shape[0]
    eye = Tensor(np.eye(d, dtype=c.dtype))
    diag = tn.sum(tn.mul(c, eye), axis=1)
    on = tn.sum(tn.square(tn.sub(1.0, diag)))
    off = tn.sub(tn.sum(tn.square(c)), tn.sum(tn.square(diag)))
    return tn.add(on, tn.scale(off, lam))


def total_loss(ce: Tensor, ib: Tensor | None, alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if ib is None or alpha == 0:
        return ce
    return tn.add(ce, tn.scale(ib, alpha))


def paired_rows(z_batch_source: Tensor, z_target: Tensor, pairs: PairIndex,
                queue_vectors: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Gather the source and target rows named by ``pairs``.

    Queue rows enter as constants so no gradient reaches the queue.
    """
    src = z_batch_source
    if queue_vectors is not None and len(queue_vectors):
        src = tn.concatenate([z_batch_source, Tensor(queue_vectors.astype(z_batch_source.dtype))], axis=0)
    return src[pairs.source], z_target[pairs.target]
