"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The trend criteria share one experiment (three phase-1 models, then the
adaptation variants on the severe and mild presets) built once per session.
It takes roughly ten minutes on a single core.
"""

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pytest

from conftest import record_criterion, rel_err
from oracles import cross_correlation_loops, ib_loss_loops, pairs_loops
from udavt import alignment as al
from udavt import baselines as bl
from udavt import cli
from udavt import tensor as tn
from udavt.config import default_config, dump_config
from udavt.model import ModelConfig, VideoTransformer, build_freeze_mask, save_checkpoint
from udavt.rng import Rng
from udavt.synth import generate_split
from udavt.tensor import Tensor
from udavt.trainer import (VARIANTS, Datasets, RunRecord, build_model, copy_model, evaluate, run_phase1,
                           run_phase2)

SEEDS = (0, 1, 2)
SEVERE_VARIANTS = ("source_only", "udavt", "udavt_supervised", "udavt_random_labels", "udavt_no_queue")
MILD_VARIANTS = ("source_only", "udavt", "udavt_supervised", "udavt_random_labels", "udavt_no_queue")


# ---------------------------------------------------------------------------
# 1-4: exact mathematics


def test_criterion_1_cross_correlation_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(50):
        r = Rng(1000 + k)
        b, d = int(r.integers(2, 17)), int(r.integers(1, 9))
        zs, zt = r.normal((b, d)), r.normal((b, d))
        c = al.cross_correlation(Tensor(zs), Tensor(zt))
        ref_c = cross_correlation_loops(zs, zt)
        loss = al.ib_loss(c, 5e-3).item()
        worst = max(worst, float(np.max(np.abs(c.data - ref_c))), abs(loss - ib_loss_loops(ref_c, 5e-3)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 5.0
    record_criterion("1 cross-correlation/IB oracle", ok, f"max abs err {worst:.2e} (< 1e-10), {elapsed:.2f}s (< 5s)")
    assert ok


def _fd_check(f, x):
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    f(t).backward()
    return rel_err(t.grad, tn.finite_difference_grad(f, np.array(x, dtype=np.float64)))


def _full_model_error() -> float:
    cfg = ModelConfig(frame_size=8, patch_size=4, channels=2, frames_per_video=2, embed_dim=8, heads=2,
                      spatial_layers=1, temporal_layers=1, mlp_ratio=2.0, num_classes=3, projection_dim=4)
    m = VideoTransformer(cfg, Rng(11), dtype=np.float64)
    r = Rng(12)
    for n, t in m.params.items():
        t.data = t.data + r.split(n).normal(t.shape, 0.3)
    m.params.apply_freeze_mask({n: False for n in m.params.names()})
    x = Rng(13).uniform(size=(2, 2, 8, 8, 2))
    y = np.array([0, 2])

    def loss():
        out = m.forward(x)
        return tn.add(tn.cross_entropy(out.logits, y),
                      tn.scale(tn.sum(tn.square(m.project(out.video_feature))), 0.1))

    loss().backward()
    worst = 0.0
    for _, t in m.params.items():
        analytic, base = t.grad.copy(), t.data

        def f(v, t=t):
            t.data = v.data
            return loss()

        fd = tn.finite_difference_grad(f, base.copy())
        t.data = base
        worst = max(worst, rel_err(analytic, fd))
    return worst


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    r = Rng(21)
    errs = {}
    proj = VideoTransformer(ModelConfig(embed_dim=8, heads=2, projection_dim=4), Rng(0), dtype=np.float64)
    zt = r.normal((6, 4))
    errs["ib(C(project))"] = _fd_check(lambda x: al.ib_loss(al.cross_correlation(proj.project(x), Tensor(zt))),
                                       r.normal((6, 8)))
    y = np.array([1, 0, 3])
    errs["cross_entropy"] = _fd_check(lambda z: tn.cross_entropy(z, y), r.normal((3, 4)))
    xt = r.normal((5, 3))
    xs = r.normal((5, 3))
    bw = bl.median_bandwidth(np.vstack([xs, xt]))
    errs["mmd"] = _fd_check(lambda x: bl.mmd_loss(x, Tensor(xt), bandwidth=bw), xs)
    zt2 = r.normal((4, 3))
    errs["infonce"] = _fd_check(lambda z: bl.infonce_cross_domain_loss(z, [0, 1, 2, 1], Tensor(zt2), [1, 1, 0, 2], 0.1),
                                r.normal((4, 3)))
    zb = r.normal((5, 3)) * 0.4
    errs["vicreg"] = _fd_check(lambda z: bl.vicreg_cross_domain_loss(z, Tensor(zb)), r.normal((5, 3)) * 0.4)
    clf = bl.DomainClassifier(4, 5, Rng(2), dtype=np.float64)
    flags = np.array([0, 1, 0, 1, 1])
    x = r.normal((5, 4))
    t = Tensor(x, requires_grad=True)
    bl.adversarial_losses(t, flags, clf, 0.7)[1].backward()
    fd = tn.finite_difference_grad(lambda v: bl.binary_cross_entropy_logits(clf(v), flags), x)
    errs["adversarial(reversal)"] = rel_err(t.grad, -0.7 * fd)
    full = _full_model_error()
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-4 and full < 1e-3 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record_criterion("2 gradient suite", ok, f"{detail}; full model {full:.1e} (< 1e-3); {elapsed:.1f}s (< 120s)")
    assert ok


def test_criterion_3_trivial_cases():
    d = 7
    checks = {
        "ib(identity)=0": al.ib_loss(Tensor(np.eye(d))).item() == 0.0,
        "ib(zero)=d": abs(al.ib_loss(Tensor(np.zeros((d, d)))).item() - d) < 1e-12,
        "mmd(same)=0": abs(bl.mmd_loss(Tensor(Rng(3).normal((6, 4))), Tensor(Rng(3).normal((6, 4)))).item()) < 1e-9,
        "ce(uniform)=lnK": abs(tn.cross_entropy(Tensor(np.zeros((5, 6))), np.arange(5)).item() - math.log(6)) < 1e-9,
    }
    ok = all(checks.values())
    record_criterion("3 trivial cases", ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


def test_criterion_4_pairing_oracle():
    mismatches = 0
    for k in range(100):
        r = Rng(2000 + k)
        n_classes = int(r.integers(1, 7))
        src = r.integers(0, n_classes, int(r.integers(0, 12))).tolist()
        queue = r.integers(0, n_classes, int(r.integers(0, 20))).tolist()
        tgt = r.integers(0, n_classes, int(r.integers(0, 12))).tolist()
        mismatches += al.build_pairs(src, tgt, queue).as_list() != pairs_loops(src, queue, tgt)
    ok = mismatches == 0
    record_criterion("4 pairing oracle", ok, f"{100 - mismatches}/100 configurations identical")
    assert ok


# ---------------------------------------------------------------------------
# the shared experiment behind 5-8 and 10


@dataclass
class Experiment:
    accs: dict = field(default_factory=dict)            # (preset, variant) -> [acc per seed]
    pseudo_tracks: dict = field(default_factory=dict)   # (preset, seed) -> per-epoch pseudo-label acc
    freeze: list = field(default_factory=list)          # (what, ok)
    models: dict = field(default_factory=dict)          # seed -> severe udavt model
    phase1_train_acc: list = field(default_factory=list)
    phase1_seconds: float = 0.0
    severe_seconds: float = 0.0
    mild_seconds: float = 0.0


def _datasets(cfg) -> Datasets:
    return Datasets(*(generate_split(cfg.data, d, s) for d, s in
                      [("source", "train"), ("source", "test"), ("target", "train"), ("target", "test")]))


def _phase2_frozen_ok(before: VideoTransformer, after: VideoTransformer, seed: int) -> bool:
    ref = copy_model(before)
    ref.reset_projection(Rng(seed).split("phase2").split("projector"))
    want, got = ref.params.hashes(), after.params.hashes()
    names = [n for n in want if n.startswith("spatial.") or n.startswith("projector.")]
    return all(want[n] == got[n] for n in names)


@pytest.fixture(scope="module")
def experiment() -> Experiment:
    exp = Experiment()
    severe, mild = default_config("severe"), default_config("mild")
    data = {"severe": _datasets(severe), "mild": _datasets(mild)}
    # source splits do not depend on the shift, so one phase-1 model per seed serves both presets
    assert np.array_equal(data["severe"].source_train.frames, data["mild"].source_train.frames)
    cfgs = {"severe": severe, "mild": mild}
    variants = {"severe": SEVERE_VARIANTS, "mild": MILD_VARIANTS}
    for seed in SEEDS:
        t0 = time.perf_counter()
        init = build_model(severe.model, seed, severe.train.dtype)
        base, rec1 = run_phase1(severe.model, severe.train, data["severe"], seed)
        exp.phase1_seconds += time.perf_counter() - t0
        exp.phase1_train_acc.append(rec1.rows[-1]["source_train_acc"])
        frozen1 = build_freeze_mask(init.params, 1)
        h0, h1 = init.params.hashes(), base.params.hashes()
        exp.freeze.append((f"phase1 seed{seed}", all(h0[n] == h1[n] for n, fr in frozen1.items() if fr)
                           and rec1.summary["phase1_frozen_unchanged"]))
        for preset in ("severe", "mild"):
            t0 = time.perf_counter()
            for v in variants[preset]:
                model = copy_model(base)
                rec = run_phase2(model, replace(cfgs[preset].train.phase2, **VARIANTS[v]), data[preset], seed,
                                 RunRecord())
                acc = evaluate(model, data[preset].target_test).accuracy
                exp.accs.setdefault((preset, v), []).append(acc)
                if v != "source_only":
                    exp.freeze.append((f"phase2 {preset} {v} seed{seed}", _phase2_frozen_ok(base, model, seed)
                                       and rec.summary["phase2_frozen_unchanged"]))
                if v == "udavt":
                    exp.pseudo_tracks[(preset, seed)] = [r["pseudo_label_acc"] for r in rec.rows]
                    if preset == "severe":
                        exp.models[seed] = model
            key = "severe_seconds" if preset == "severe" else "mild_seconds"
            setattr(exp, key, getattr(exp, key) + time.perf_counter() - t0)
    return exp


def _mean(exp, preset, variant) -> float:
    return float(np.mean(exp.accs[(preset, variant)]))


def _fmt(exp, preset, variant) -> str:
    vals = exp.accs[(preset, variant)]
    return f"{variant} {np.mean(vals):.3f} [{' '.join(f'{v:.3f}' for v in vals)}]"


def test_criterion_5_freeze_integrity(experiment):
    bad = [name for name, ok in experiment.freeze if not ok]
    ok = not bad
    record_criterion("5 freeze integrity", ok,
                     f"{len(experiment.freeze) - len(bad)}/{len(experiment.freeze)} runs keep frozen hashes"
                     + (f"; broken: {bad}" if bad else ""))
    assert ok


def test_phase1_fits_source(experiment):
    """Phase 1 reaches at least 95% source train accuracy for every seed."""
    accs = experiment.phase1_train_acc
    ok = min(accs) >= 0.95
    record_criterion("   phase-1 source train accuracy", ok, " ".join(f"{a:.3f}" for a in accs) + " (>= 0.95)")
    assert ok


def test_severe_source_only_band(experiment):
    """The severe shift leaves a source-only model between 40% and 70% on the target."""
    vals = experiment.accs[("severe", "source_only")]
    ok = 0.40 <= float(np.mean(vals)) <= 0.70
    record_criterion("   severe source-only band", ok, _fmt(experiment, "severe", "source_only") + " in [0.40, 0.70]")
    assert ok


def test_criterion_6_trend_reproduction(experiment):
    so, ud, sup = (_mean(experiment, "severe", v) for v in ("source_only", "udavt", "udavt_supervised"))
    minutes = (experiment.phase1_seconds + experiment.severe_seconds) / 60
    gain = ud - so
    ok = so < ud and gain >= 0.10 and sup >= ud and minutes <= 30
    detail = (f"{_fmt(experiment, 'severe', 'source_only')}; {_fmt(experiment, 'severe', 'udavt')}; "
              f"{_fmt(experiment, 'severe', 'udavt_supervised')}; gain {100 * gain:+.1f} pts (need >= +10); "
              f"{minutes:.1f} min (<= 30)")
    record_criterion("6 trend reproduction (severe)", ok, detail)
    assert ok


def test_criterion_7_label_quality_ordering(experiment):
    parts, ok = [], True
    for preset in ("severe", "mild"):
        gt, ps, rnd = (_mean(experiment, preset, v) for v in ("udavt_supervised", "udavt", "udavt_random_labels"))
        good = gt >= ps >= rnd
        ok &= good
        parts.append(f"{preset}: gt {gt:.3f} >= pseudo {ps:.3f} >= random {rnd:.3f} {'ok' if good else 'VIOLATED'}")
    record_criterion("7 label-quality ordering", ok, "; ".join(parts))
    assert ok


def test_criterion_8_queue_ablation(experiment):
    q, nq = _mean(experiment, "severe", "udavt"), _mean(experiment, "severe", "udavt_no_queue")
    mq, mnq = _mean(experiment, "mild", "udavt"), _mean(experiment, "mild", "udavt_no_queue")
    ok = q >= nq
    record_criterion("8 queue ablation (severe)", ok,
                     f"queue {q:.3f} >= no queue {nq:.3f}; mild (logged only) queue {mq:.3f} vs no queue {mnq:.3f}")
    assert ok


def test_pseudo_label_accuracy_trend_on_mild(experiment):
    """Pseudo-label accuracy never drops across epochs in at least two of three seeds."""
    monotone = [all(b >= a for a, b in zip(tr, tr[1:])) for tr in
                (experiment.pseudo_tracks[("mild", s)] for s in SEEDS)]
    ok = sum(monotone) >= 2
    parts = []
    for s, m in zip(SEEDS, monotone):
        tr = experiment.pseudo_tracks[("mild", s)]
        drops = [a - b for a, b in zip(tr, tr[1:]) if b < a]
        parts.append(f"seed{s} {tr[0]:.3f}->{tr[-1]:.3f} "
                     + ("monotone" if m else f"{len(drops)} drops, largest {max(drops):.4f}"))
    tracks = "; ".join(parts)
    record_criterion("   mild pseudo-label trend", ok, tracks)
    assert ok


# ---------------------------------------------------------------------------
# 9-10: command-line artefacts


def test_criterion_9_determinism(tmp_path):
    cfg = default_config("severe")
    cfg.data.train_per_class, cfg.data.test_per_class = 6, 3
    cfg.train.phase1.epochs, cfg.train.phase2.epochs = 2, 2
    cfg_file = tmp_path / "det.ini"
    cfg_file.write_text(dump_config(cfg))
    blobs = []
    for name in ("first", "second"):
        out = tmp_path / name
        rc = cli.main(["train", "--config", str(cfg_file), "--out", str(out), "--phase", "both", "--seed", "2"])
        assert rc == 0
        blobs.append((cli.run_dir(out, "udavt", 2) / "summary.json").read_bytes())
    ok = blobs[0] == blobs[1]
    record_criterion("9 determinism", ok, f"summary.json {'byte-identical' if ok else 'differs'} "
                                          f"across two cmd_train runs ({len(blobs[0])} bytes)")
    assert ok


def test_criterion_10_attention_export(experiment, tmp_path):
    total, good = 0, 0
    for seed, model in experiment.models.items():
        ckpt = tmp_path / f"udavt_seed{seed}.ckpt"
        save_checkpoint(ckpt, model, seed, {"variant": "udavt"})
        dest = tmp_path / f"attention_seed{seed}.json"
        rc = cli.main(["export-attention", "--out", str(tmp_path), "--checkpoint", str(ckpt),
                       "--samples", "1000", "--out-file", str(dest)])
        assert rc == 0
        t = model.config.frames_per_video
        for rec in json.loads(dest.read_text())["records"]:
            total += 1
            w = rec["weights"]
            top = rec["top2"]
            good += (abs(sum(w) - 1.0) <= 1e-6 and len(w) == t and len(top) == 2 and top[0] != top[1]
                     and all(0 <= i < t for i in top) and w[top[0]] == max(w)
                     and w[top[1]] == max(v for i, v in enumerate(w) if i != top[0]))
    ok = total > 0 and good == total
    record_criterion("10 attention export", ok, f"{good}/{total} records valid")
    assert ok
