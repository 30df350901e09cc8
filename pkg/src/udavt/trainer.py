"""Two-phase training, evaluation and the comparison matrix.

Phase 1 fine-tunes a partially frozen encoder on labelled source clips with
cross-entropy. Phase 2 freezes the spatial encoder, trains the temporal
encoder and classifier on source cross-entropy plus an alignment term
between source and (pseudo-labelled) target clips.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import alignment as al
from . import baselines as bl
from . import tensor as tn
from .errors import ConfigError, NonFiniteError
from .model import ModelConfig, ParamStore, VideoTransformer, build_freeze_mask
from .optim import SGD, cosine_lr
from .rng import Rng
from .synth import VideoDataset, batch_iterator
from .tensor import Tensor

log = logging.getLogger(__name__)

METHODS = ("udavt", "mmd", "mcd", "adversarial", "infonce", "vicreg", "source_only")
LABEL_MODES = ("pseudo", "ground_truth", "random")

# variant name -> overrides of Phase2Config
VARIANTS: dict[str, dict] = {
    "source_only": {"method": "source_only"},
    "udavt": {"method": "udavt"},
    "udavt_supervised": {"method": "udavt", "label_mode": "ground_truth"},
    "udavt_no_queue": {"method": "udavt", "use_queue": False},
    "udavt_random_labels": {"method": "udavt", "label_mode": "random"},
    "mmd": {"method": "mmd"},
    "mcd": {"method": "mcd"},
    "adversarial": {"method": "adversarial"},
    "infonce": {"method": "infonce"},
    "vicreg": {"method": "vicreg"},
}


class TrainingAborted(RuntimeError):
    """Training hit a non-finite value; ``diagnostics`` describes where."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class Phase1Config:
    epochs: int = 20
    lr: float = 0.02
    weight_decay: float = 1e-9
    momentum: float = 0.9
    batch_size: int = 8
    eval_every: int = 5

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("phase1: epochs >= 0, batch_size >= 1, eval_every >= 1 required")
        if self.lr <= 0:
            raise ConfigError(f"phase1: lr must be positive, got {self.lr}")


@dataclass
class Phase2Config:
    epochs: int = 20
    lr: float = 0.005
    weight_decay: float = 1e-9
    momentum: float = 0.9
    batch_size_per_domain: int = 64
    alpha: float = 0.025
    lam: float = 5e-3
    queue_capacity: int = 2048
    queue_max_age: int = 2
    pair_cap: int = 4096
    label_mode: str = "pseudo"
    use_queue: bool = True
    method: str = "udavt"
    refresh: str = "epoch"
    confidence_threshold: float = 0.0
    udavt_target_ce: bool = False
    target_ce_weight: float = 1.0
    mmd_weight: float = 1.0
    infonce_weight: float = 0.1
    infonce_temperature: float = 0.1
    vicreg_weight: float = 0.01
    adversarial_weight: float = 1.0
    grl_gamma: float = 10.0
    domain_hidden: int = 64

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"phase2: unknown method {self.method!r}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"phase2: unknown label_mode {self.label_mode!r}")
        if self.refresh not in ("epoch", "batch"):
            raise ConfigError(f"phase2: refresh must be 'epoch' or 'batch'")
        if self.lr <= 0:
            raise ConfigError(f"phase2: lr must be positive, got {self.lr}")
        if self.alpha < 0 or self.lam < 0:
            raise ConfigError("phase2: alpha and lam must be non-negative")
        if self.epochs < 0 or self.batch_size_per_domain < 1 or self.queue_capacity < 0 or self.pair_cap < 2:
            raise ConfigError("phase2: invalid epochs/batch/queue/pair_cap")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError("phase2: confidence_threshold outside [0, 1]")


# values reported for fine-tuning a pretrained encoder; the defaults above are
# for training the desk-scale model from random initialisation
PRETRAINED_PHASE1 = Phase1Config(epochs=20, lr=0.001, weight_decay=1e-9, batch_size=8)
PRETRAINED_PHASE2 = Phase2Config(epochs=20, lr=0.005, weight_decay=1e-9, batch_size_per_domain=64)


@dataclass
class TrainConfig:
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    dtype: str = "float32"

    def validate(self) -> None:
        self.phase1.validate()
        self.phase2.validate()
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def append(self, row: dict) -> None:
        self.rows.append(dict(row))


@dataclass
class EvalResult:
    accuracy: float
    per_class: list[float]
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_class": self.per_class,
                "confusion": self.confusion.tolist()}


# ---------------------------------------------------------------------------
# evaluation


def evaluate_predictions(logits: np.ndarray, labels: np.ndarray, num_classes: int) -> EvalResult:
    pred = np.argmax(np.asarray(logits), axis=1)
    labels = np.asarray(labels, dtype=np.int64)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    counts = conf.sum(axis=1)
    per_class = [float(conf[k, k] / counts[k]) if counts[k] else float("nan") for k in range(num_classes)]
    acc = float((pred == labels).mean()) if len(labels) else float("nan")
    return EvalResult(acc, per_class, conf)


def predict_logits(model: VideoTransformer, dataset: VideoDataset | None = None,
                   frame_features: np.ndarray | None = None, batch_size: int = 64) -> np.ndarray:
    """Logits for every clip, from raw frames or precomputed spatial features."""
    out = []
    with tn.no_grad():
        n = len(frame_features) if frame_features is not None else len(dataset)
        for s in range(0, n, batch_size):
            if frame_features is not None:
                ff = Tensor(frame_features[s:s + batch_size])
            else:
                ff = model.spatial_forward(dataset.frames[s:s + batch_size].astype(model.dtype))
            f, _ = model.temporal_forward(ff)
            out.append(model.classify(f).data)
    return np.concatenate(out, axis=0).astype(np.float64)


def evaluate(model: VideoTransformer, dataset: VideoDataset,
             frame_features: np.ndarray | None = None) -> EvalResult:
    logits = predict_logits(model, dataset, frame_features)
    return evaluate_predictions(logits, dataset.labels, model.config.num_classes)


def export_attention(model: VideoTransformer, dataset: VideoDataset, samples: int) -> list[dict]:
    """Per-clip temporal attention from the [CLS] token, with the two most attended frames."""
    records = []
    n = min(samples, len(dataset))
    with tn.no_grad():
        for s in range(0, n, 64):
            e = min(n, s + 64)
            ff = model.spatial_forward(dataset.frames[s:e].astype(model.dtype))
            f, att = model.temporal_forward(ff)
            pred = np.argmax(model.classify(f).data, axis=1)
            for i in range(e - s):
                w = att[i].astype(np.float64)
                top = np.argsort(-w, kind="stable")[:2]
                records.append({
                    "id": int(dataset.ids[s + i]),
                    "true_label": int(dataset.labels[s + i]),
                    "predicted_label": int(pred[i]),
                    "weights": [float(v) for v in w],
                    "top2": [int(top[0]), int(top[1])],
                })
    return records


# ---------------------------------------------------------------------------
# phase 1


def _abort(exc: Exception, phase: int, epoch: int, batch: int, ids) -> TrainingAborted:
    diag = {"phase": phase, "epoch": epoch, "batch": batch, "sample_ids": [int(i) for i in ids],
            "error": str(exc)}
    return TrainingAborted(f"non-finite value in phase {phase}, epoch {epoch}, batch {batch}: {exc}", diag)


def phase1_train(model: VideoTransformer, source_train: VideoDataset, cfg: Phase1Config, seed: int,
                 record: RunRecord | None = None,
                 eval_sets: dict[str, VideoDataset] | None = None) -> RunRecord:
    """Source-only cross-entropy fine-tuning under the phase-1 freeze mask."""
    cfg.validate()
    record = record if record is not None else RunRecord()
    eval_sets = eval_sets or {}
    model.params.apply_freeze_mask(build_freeze_mask(model.params, 1))
    frozen_before = _frozen_hashes(model)
    opt = SGD(model.params.trainable(), cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = Rng(seed).split("phase1")
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        losses, correct, seen = [], 0, 0
        for b, idx in enumerate(batch_iterator(len(source_train), cfg.batch_size, rng.split(f"epoch{epoch}"))):
            try:
                out = model.forward(source_train.frames[idx].astype(model.dtype))
                loss = tn.cross_entropy(out.logits, source_train.labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
            except NonFiniteError as exc:
                raise _abort(exc, 1, epoch, b, source_train.ids[idx]) from exc
            losses.append(loss.item())
            correct += int((np.argmax(out.logits.data, axis=1) == source_train.labels[idx]).sum())
            seen += len(idx)
        row = {"epoch": epoch, "phase": 1, "lr": lr, "loss_total": float(np.mean(losses)),
               "loss_ce": float(np.mean(losses)), "source_train_acc": correct / max(seen, 1)}
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            for name, ds in eval_sets.items():
                row[f"{name}_acc"] = evaluate(model, ds).accuracy
        record.append(row)
        log.info("phase1 epoch %d loss %.4f train acc %.3f", epoch, row["loss_ce"], row["source_train_acc"])
    record.summary["phase1_frozen_unchanged"] = frozen_before == _frozen_hashes(model)
    return record


def _frozen_hashes(model: VideoTransformer) -> dict[str, str]:
    hashes = model.params.hashes()
    return {n: h for n, h in hashes.items() if model.params.frozen[n]}


# ---------------------------------------------------------------------------
# phase 2


class _Heads:
    """Auxiliary trainable heads some baselines need (second classifier, domain classifier)."""

    def __init__(self, model: VideoTransformer, cfg: Phase2Config, rng: Rng):
        self.params: dict[str, Tensor] = {}
        self.domain = None
        d, k, dt = model.config.embed_dim, model.config.num_classes, model.dtype
        if cfg.method == "mcd":
            self.params["classifier2.weight"] = Tensor(rng.split("c2").trunc_normal((d, k), 0.02, dtype=dt),
                                                       requires_grad=True)
            self.params["classifier2.bias"] = Tensor(np.zeros(k, dtype=dt), requires_grad=True)
        if cfg.method == "adversarial":
            self.domain = bl.DomainClassifier(d, cfg.domain_hidden, rng.split("domain"), dtype=dt)
            self.params.update(self.domain.params)

    def classify2(self, f: Tensor) -> Tensor:
        return tn.linear(f, self.params["classifier2.weight"], self.params["classifier2.bias"])


def _target_labels(cfg: Phase2Config, model, target_train: VideoDataset, tgt_feats: np.ndarray,
                   random_labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels used for pairing plus the current pseudo-labels (for logging)."""
    pseudo, conf = al.pseudo_label(predict_logits(model, frame_features=tgt_feats))
    if cfg.label_mode == "ground_truth":
        used = target_train.labels.copy()
    elif cfg.label_mode == "random":
        used = random_labels.copy()
    else:
        used = pseudo.copy()
        if cfg.confidence_threshold > 0:
            used[conf < cfg.confidence_threshold] = -1
    return used, pseudo


def phase2_train(model: VideoTransformer, source_train: VideoDataset, target_train: VideoDataset,
                 cfg: Phase2Config, seed: int, record: RunRecord | None = None,
                 eval_sets: dict[str, VideoDataset] | None = None) -> RunRecord:
    """Adaptation phase. ``target_train.labels`` are read only for logging,
    and for pairing when ``label_mode == 'ground_truth'``."""
    cfg.validate()
    record = record if record is not None else RunRecord()
    eval_sets = eval_sets or {}
    if cfg.method == "source_only":
        record.summary["phase2_frozen_unchanged"] = True
        return record

    rng = Rng(seed).split("phase2")
    model.reset_projection(rng.split("projector"))
    model.params.apply_freeze_mask(build_freeze_mask(model.params, 2))
    frozen_before = _frozen_hashes(model)
    k = model.config.num_classes

    # the spatial encoder is frozen for the whole phase, so its features are fixed
    src_feats = model.spatial_features(source_train.frames.astype(model.dtype))
    tgt_feats = model.spatial_features(target_train.frames.astype(model.dtype))
    eval_feats = {n: model.spatial_features(ds.frames.astype(model.dtype)) for n, ds in eval_sets.items()}

    heads = _Heads(model, cfg, rng.split("heads"))
    trainable = model.params.trainable()
    enc_params = {n: t for n, t in trainable.items() if n.startswith("temporal.")}
    head_params = {n: t for n, t in trainable.items() if not n.startswith("temporal.")}
    head_params.update(heads.params)
    opt_enc = SGD(enc_params, cfg.lr, cfg.momentum, cfg.weight_decay)
    opt_head = SGD(head_params, cfg.lr, cfg.momentum, cfg.weight_decay)

    use_queue = cfg.use_queue and cfg.method in ("udavt", "vicreg")
    queue = al.FeatureQueue(min(cfg.queue_capacity, len(source_train)), cfg.queue_max_age)
    random_labels = Rng(seed).split("random_labels").integers(0, k, len(target_train)).astype(np.int64)
    pair_rng = rng.split("pairs")
    steps_per_epoch = math.ceil(len(source_train) / cfg.batch_size_per_domain)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    bs = cfg.batch_size_per_domain
    step = 0

    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        queue.evict_stale(epoch)
        try:
            used_labels, pseudo = _target_labels(cfg, model, target_train, tgt_feats, random_labels)
        except NonFiniteError as exc:
            # batch -1 marks the per-epoch pseudo-label refresh
            raise _abort(exc, 2, epoch, -1, target_train.ids) from exc
        pseudo_acc = float((pseudo == target_train.labels).mean())
        sums: dict[str, float] = {}
        pair_counts, zero_pair_steps = [], 0
        src_iter = batch_iterator(len(source_train), bs, rng.split(f"src{epoch}"))
        tgt_order = np.concatenate([rng.split(f"tgt{epoch}.{r}").permutation(len(target_train))
                                    for r in range(math.ceil(len(source_train) / max(len(target_train), 1)) + 1)])
        for b, idx_s in enumerate(src_iter):
            idx_t = tgt_order[b * bs:(b + 1) * bs]
            if cfg.refresh == "batch" and cfg.label_mode == "pseudo":
                pl, conf = al.pseudo_label(predict_logits(model, frame_features=tgt_feats[idx_t]))
                if cfg.confidence_threshold > 0:
                    pl[conf < cfg.confidence_threshold] = -1
                used_labels[idx_t] = pl
            progress = step / total_steps
            try:
                terms, n_pairs = _phase2_step(model, heads, cfg, src_feats[idx_s], source_train.labels[idx_s],
                                              tgt_feats[idx_t], used_labels[idx_t], queue, use_queue,
                                              pair_rng, opt_enc, opt_head, lr, progress, epoch)
            except NonFiniteError as exc:
                raise _abort(exc, 2, epoch, b, np.concatenate([source_train.ids[idx_s],
                                                               target_train.ids[idx_t]])) from exc
            for key, v in terms.items():
                sums[key] = sums.get(key, 0.0) + v
            if n_pairs is not None:
                pair_counts.append(n_pairs)
                zero_pair_steps += n_pairs < 2
            step += 1
        n_steps = max(b + 1, 1)
        row = {"epoch": epoch, "phase": 2, "lr": lr}
        row.update({key: v / n_steps for key, v in sums.items()})
        row["pseudo_label_acc"] = pseudo_acc
        if pair_counts:
            row["pair_count"] = float(np.mean(pair_counts))
            row["queue_fill"] = len(queue)
            if zero_pair_steps > 0.5 * n_steps:
                record.warnings.append(f"epoch {epoch}: no usable pairs in {zero_pair_steps}/{n_steps} steps")
        for name, ds in eval_sets.items():
            row[f"{name}_acc"] = evaluate(model, ds, eval_feats[name]).accuracy
        record.append(row)
        log.info("phase2 epoch %d %s", epoch, {k_: round(v, 4) for k_, v in row.items() if isinstance(v, float)})

    record.summary["phase2_frozen_unchanged"] = frozen_before == _frozen_hashes(model)
    return record


def _phase2_step(model, heads, cfg: Phase2Config, fs_np, ys, ft_np, yt_used, queue, use_queue,
                 pair_rng, opt_enc, opt_head, lr, progress, epoch) -> tuple[dict, int | None]:
    ns = len(fs_np)
    ff = Tensor(np.concatenate([fs_np, ft_np], axis=0))
    f_all, _ = model.temporal_forward(ff)
    f_s, f_t = f_all[:ns], f_all[ns:]
    logits_s = model.classify(f_s)
    ce = tn.cross_entropy(logits_s, ys)
    terms = {"loss_ce": ce.item()}
    n_pairs = None
    valid_t = yt_used >= 0

    def pseudo_ce():
        if not valid_t.any():
            return None
        t = bl.target_pseudo_ce(model.classify(f_t[np.nonzero(valid_t)[0]]), yt_used[valid_t],
                                cfg.target_ce_weight)
        terms["loss_target_ce"] = t.item()
        return t

    loss = ce
    if cfg.method in ("udavt", "vicreg"):
        z_all = model.project(f_all)
        z_s, z_t = z_all[:ns], z_all[ns:]
        q_labels = queue.labels() if use_queue else None
        pairs = al.build_pairs(ys, yt_used, q_labels)
        pairs = al.cap_pairs(pairs, cfg.pair_cap, pair_rng)
        n_pairs = len(pairs)
        align = None
        if n_pairs >= 2:
            qv = queue.vectors(z_s.shape[1], model.dtype) if use_queue else None
            zs_rows, zt_rows = al.paired_rows(z_s, z_t, pairs, qv)
            if cfg.method == "udavt":
                c = al.cross_correlation(zs_rows, zt_rows)
                align = al.ib_loss(c, cfg.lam)
                terms["loss_ib"] = align.item()
                loss = al.total_loss(ce, align, cfg.alpha)
            else:
                align = bl.vicreg_cross_domain_loss(zs_rows, zt_rows)
                terms["loss_vicreg"] = align.item()
                loss = tn.add(loss, tn.scale(align, cfg.vicreg_weight))
        else:
            terms["loss_ib" if cfg.method == "udavt" else "loss_vicreg"] = 0.0
        if cfg.method == "vicreg" or cfg.udavt_target_ce:
            t = pseudo_ce()
            if t is not None:
                loss = tn.add(loss, t)
        if use_queue:
            queue.push(z_s.data, ys, epoch)
    elif cfg.method == "mmd":
        m = bl.mmd_loss(f_s, f_t)
        terms["loss_mmd"] = m.item()
        loss = tn.add(loss, tn.scale(m, cfg.mmd_weight))
        t = pseudo_ce()
        if t is not None:
            loss = tn.add(loss, t)
    elif cfg.method == "infonce":
        z_all = model.project(f_all)
        m = bl.infonce_cross_domain_loss(z_all[:ns], ys, z_all[ns:], yt_used, cfg.infonce_temperature)
        terms["loss_infonce"] = m.item()
        loss = tn.add(loss, tn.scale(m, cfg.infonce_weight))
        t = pseudo_ce()
        if t is not None:
            loss = tn.add(loss, t)
    elif cfg.method == "adversarial":
        flags = np.concatenate([np.zeros(ns), np.ones(len(ft_np))]).astype(np.int64)
        scale = cfg.adversarial_weight * bl.grl_ramp(progress, cfg.grl_gamma)
        clf_loss, feat_loss = bl.adversarial_losses(f_all, flags, heads.domain, scale)
        terms["loss_domain"] = clf_loss.item()
        loss = tn.add(tn.add(loss, clf_loss), feat_loss)
        t = pseudo_ce()
        if t is not None:
            loss = tn.add(loss, t)
    elif cfg.method == "mcd":
        return _mcd_step(model, heads, cfg, f_s, f_t, ys, ce, terms, pseudo_ce, ff, ns,
                         opt_enc, opt_head, lr), None

    terms["loss_total"] = loss.item()
    opt_enc.zero_grad()
    opt_head.zero_grad()
    loss.backward()
    opt_enc.step(lr)
    opt_head.step(lr)
    return terms, n_pairs


def _mcd_step(model, heads, cfg, f_s, f_t, ys, ce, terms, pseudo_ce, ff, ns, opt_enc, opt_head, lr) -> dict:
    # A: encoder + both classifiers on source
    loss_a = tn.add(ce, tn.cross_entropy(heads.classify2(f_s), ys))
    t = pseudo_ce()
    if t is not None:
        loss_a = tn.add(loss_a, t)
    opt_enc.zero_grad()
    opt_head.zero_grad()
    loss_a.backward()
    opt_enc.step(lr)
    opt_head.step(lr)

    # B: encoder fixed, classifiers keep source accuracy and disagree on target
    with tn.no_grad():
        f_fix, _ = model.temporal_forward(ff)
    fs_c, ft_c = Tensor(f_fix.data[:ns]), Tensor(f_fix.data[ns:])
    src_ce = tn.add(tn.cross_entropy(model.classify(fs_c), ys), tn.cross_entropy(heads.classify2(fs_c), ys))
    disc_b = bl.classifier_discrepancy(model.classify(ft_c), heads.classify2(ft_c))
    loss_b = tn.sub(src_ce, disc_b)
    opt_head.zero_grad()
    loss_b.backward()
    opt_head.step(lr)

    # C: classifiers fixed, encoder reduces the disagreement
    f_all, _ = model.temporal_forward(ff)
    f_t2 = f_all[ns:]
    disc_c = bl.classifier_discrepancy(model.classify(f_t2), heads.classify2(f_t2))
    opt_enc.zero_grad()
    opt_head.zero_grad()
    disc_c.backward()
    opt_enc.step(lr)
    opt_head.zero_grad()

    terms["loss_discrepancy"] = disc_c.item()
    terms["loss_total"] = loss_a.item()
    return terms


# ---------------------------------------------------------------------------
# whole runs


@dataclass
class Datasets:
    source_train: VideoDataset
    source_test: VideoDataset
    target_train: VideoDataset
    target_test: VideoDataset


def build_model(model_cfg: ModelConfig, seed: int, dtype: str = "float32") -> VideoTransformer:
    return VideoTransformer(model_cfg, Rng(seed).split("model"), dtype=np.dtype(dtype))


def run_phase1(model_cfg: ModelConfig, train_cfg: TrainConfig, data: Datasets, seed: int
               ) -> tuple[VideoTransformer, RunRecord]:
    model = build_model(model_cfg, seed, train_cfg.dtype)
    record = RunRecord()
    phase1_train(model, data.source_train, train_cfg.phase1, seed, record,
                 {"source_test": data.source_test, "target_test": data.target_test})
    return model, record


def run_phase2(model: VideoTransformer, phase2: Phase2Config, data: Datasets, seed: int,
               record: RunRecord) -> RunRecord:
    phase2_train(model, data.source_train, data.target_train, phase2, seed, record,
                 {"source_test": data.source_test, "target_test": data.target_test})
    return record


def finalize_summary(model: VideoTransformer, data: Datasets, record: RunRecord) -> dict:
    tgt = evaluate(model, data.target_test)
    src = evaluate(model, data.source_test)
    record.summary.update({
        "source_test_acc": src.accuracy,
        "target_test_acc": tgt.accuracy,
        "target_per_class": tgt.per_class,
        "target_confusion": tgt.confusion.tolist(),
        "warnings": list(record.warnings),
    })
    return record.summary


def copy_model(model: VideoTransformer) -> VideoTransformer:
    clone = VideoTransformer.__new__(VideoTransformer)
    clone.config = model.config
    clone.dtype = model.dtype
    clone.params = ParamStore()
    for n, t in model.params.items():
        clone.params.add(n, t.data.copy())
    clone.params.apply_freeze_mask(dict(model.params.frozen))
    return clone


def run_variants(model_cfg: ModelConfig, train_cfg: TrainConfig, data: Datasets,
                 variants: list[str], seeds: list[int]) -> dict[str, list[dict]]:
    """Run each variant for each seed, sharing one phase-1 model per seed.

    Returns variant -> list of per-seed summaries. A failing cell records an
    ``error`` entry instead of stopping the matrix.
    """
    results: dict[str, list[dict]] = {v: [] for v in variants}
    for seed in seeds:
        base, rec1 = run_phase1(model_cfg, train_cfg, data, seed)
        for v in variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
            p2 = replace(train_cfg.phase2, **VARIANTS[v])
            record = RunRecord(rows=list(rec1.rows), summary=dict(rec1.summary))
            model = copy_model(base)
            try:
                run_phase2(model, p2, data, seed, record)
                summary = finalize_summary(model, data, record)
            except TrainingAborted as exc:
                summary = {"error": str(exc), "diagnostics": exc.diagnostics}
            summary.update({"variant": v, "seed": seed})
            summary["rows"] = record.rows
            results[v].append(summary)
            log.info("variant %s seed %d -> %s", v, seed, summary.get("target_test_acc"))
    return results


def aggregate(results: dict[str, list[dict]]) -> list[dict]:
    rows = []
    for v, runs in results.items():
        ok = [r["target_test_acc"] for r in runs if "error" not in r]
        failed = [r["seed"] for r in runs if "error" in r]
        rows.append({
            "variant": v,
            "mean": float(np.mean(ok)) if ok else float("nan"),
            "std": float(np.std(ok)) if ok else float("nan"),
            "n": len(ok),
            "failed_seeds": failed,
        })
    return rows
