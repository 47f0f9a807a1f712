"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see ``conftest.py``).
Criteria 6-10 train real models on the synthetic benchmark and are marked
``slow``; together they take tens of CPU-minutes.
"""
import copy
from statistics import fmean

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from oracles import brute_force, brute_force_map, random_map_case
from promptalign import pipeline
from promptalign.alignment import (
    SOURCE,
    TARGET,
    compute_soft_mask,
    confident_queries,
    gradient_reversal,
    total_adversarial_loss,
)
from promptalign.boxes import BoxLabel
from promptalign.detector import Detector, ModelConfig
from promptalign.losses import detection_loss
from promptalign.matching import solve_cost_matrix
from promptalign.metrics import evaluate_map
from promptalign.pipeline import (
    Flags,
    TrainConfig,
    adapt_cloud_model,
    adversarial_terms,
    generate_pseudo_labels,
    match_batch,
    new_cloud_state,
    parameter_hash,
    predict,
    retrain_edge_model,
    train_supervised,
)
from promptalign.synthdata import BenchmarkConfig, DomainSpec, build_benchmark
from promptalign.types import DetectionSet
from promptalign.vpg import PromptComponentBank, ema_update, generate_prompt

ROWS = ("none", "dqfa", "tiafa", "dqfa+tiafa", "full")


def record(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = (passed, detail)
    print(f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")


# ------------------------------------------------------------------ 1. gradient exactness

GRAD_MODEL = ModelConfig(image_size=16, backbone_channels=(3, 4, 4), d_model=8, n_heads=2, enc_layers=1,
                         dec_layers=1, ffn_dim=8, n_queries=4, d_prompt=4, n_components=3)


def _random_labels(gen, n_images, n_objects):
    out = []
    for _ in range(n_images):
        xy = torch.rand(n_objects, 2, generator=gen) * 0.5 + 0.25
        wh = torch.rand(n_objects, 2, generator=gen) * 0.2 + 0.15
        cls = torch.randint(0, 3, (n_objects,), generator=gen)
        out.append([BoxLabel(int(c), tuple(float(v) for v in (*p, *s))) for c, p, s in zip(cls, xy, wh)])
    return out


def _objective_parts(model, discs, batch, cfg, strength):
    """Detection loss on the source batch and the summed alignment losses of both domains."""
    src, src_labels, tgt, tgt_labels = batch
    out_s = model(src, use_prompt=True, use_domain_query=True)
    l_det = detection_loss(out_s.detections, src_labels, match_batch(out_s.detections, src_labels, cfg.match_cost),
                           cfg.loss)
    out_t = model(tgt, use_prompt=True, use_domain_query=True)
    l_adv = (total_adversarial_loss(adversarial_terms(out_s, SOURCE, src_labels, discs, cfg, strength), cfg.adv)
             + total_adversarial_loss(adversarial_terms(out_t, TARGET, tgt_labels, discs, cfg, strength), cfg.adv))
    return l_det, l_adv


def _central_difference(tensor, fn, eps=1e-6):
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def test_criterion_01_gradient_exactness(monkeypatch):
    cfg = TrainConfig(flags=Flags(True, True, True), disc_hidden=4)
    state = new_cloud_state(GRAD_MODEL, seed=11, disc_hidden=4)
    model, discs = state.detector.double(), state.discriminators.double()
    # move the bank's forward copy away from the trainable one so the two are distinguishable
    with torch.no_grad():
        model.vpg.bank.slow.add_(0.3 * torch.randn_like(model.vpg.bank.slow))
    gen = torch.Generator().manual_seed(5)
    batch = (torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64), _random_labels(gen, 2, 2),
             torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64), _random_labels(gen, 2, 1))
    strength = 0.7

    # The soft mask (computed on detached tensors) and the bipartite matchings are piecewise-constant
    # in the parameters; the analytic gradient holds them fixed, so the finite differences replay them.
    frozen = {name: [] for name in ("compute_soft_mask", "hungarian_match")}

    def recording(fn, log):
        def wrapper(*args, **kw):
            log.append(fn(*args, **kw))
            return log[-1]
        return wrapper

    for name, log in frozen.items():
        monkeypatch.setattr(pipeline, name, recording(getattr(pipeline, name), log))
    l_det, l_adv = _objective_parts(model, discs, batch, cfg, strength)
    (l_det + l_adv).backward()
    assert frozen["compute_soft_mask"] and all(p is not None for p in frozen["compute_soft_mask"])

    def replay_all():
        for name, log in frozen.items():
            replay = iter(log)
            monkeypatch.setattr(pipeline, name, lambda *a, _it=replay, **k: next(_it))

    def feature_side():
        replay_all()
        with torch.no_grad():
            d, a = _objective_parts(model, discs, batch, cfg, strength)
        return float(d - strength * a)

    def discriminator_side():
        replay_all()
        with torch.no_grad():
            d, a = _objective_parts(model, discs, batch, cfg, strength)
        return float(d + a)

    groups = {
        "vpg fast bank": [(model.vpg.bank.slow, model.vpg.bank.fast, feature_side)],
        "vpg generator": [(p, p, feature_side) for n, p in model.vpg.named_parameters() if n != "bank.fast"],
        "encoder": [(p, p, feature_side) for p in model.encoder.parameters()],
        "decoder": [(p, p, feature_side) for p in model.decoder.parameters()],
        "heads": [(p, p, feature_side) for p in model.heads.parameters()],
        "discriminators": [(p, p, discriminator_side) for p in discs.parameters()],
    }
    errors = {}
    for name, members in groups.items():
        analytic = torch.cat([g.grad.reshape(-1) for _, g, _ in members])
        numeric = torch.cat([_central_difference(t, fn).reshape(-1) for t, _, fn in members])
        scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        errors[name] = (analytic - numeric).norm().item() / scale
    worst = max(errors, key=errors.get)
    passed = errors[worst] < 1e-4
    record(1, passed, f"max relative gradient error {errors[worst]:.2e} ({worst}) over {len(groups)} groups")
    assert passed, errors


# ------------------------------------------------------------------ 2. gradient reversal

def test_criterion_02_gradient_reversal():
    gen = torch.Generator().manual_seed(2)
    worst = 0.0
    for _ in range(100):
        shape = tuple(int(v) for v in torch.randint(1, 6, (int(torch.randint(1, 4, (1,), generator=gen)),),
                                                    generator=gen))
        x = torch.randn(shape, generator=gen, dtype=torch.float64, requires_grad=True)
        w = torch.randn(shape, generator=gen, dtype=torch.float64)
        s = float(torch.rand(1, generator=gen, dtype=torch.float64) * 3)
        (g_plain,) = torch.autograd.grad((torch.tanh(x) * w).sum(), x)
        (g_rev,) = torch.autograd.grad((torch.tanh(gradient_reversal(x, s)) * w).sum(), x)
        worst = max(worst, (g_rev + s * g_plain).abs().max().item())
    passed = worst < 1e-10
    record(2, passed, f"max |grad_reversed + s * grad| = {worst:.1e} over 100 cases")
    assert passed


# ------------------------------------------------------------------ 3. matching oracle

def test_criterion_03_matching_oracle():
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(200):
        n_q = int(rng.integers(1, 7))
        n_t = int(rng.integers(0, n_q + 1))
        cost = rng.uniform(0, 10, (n_q, n_t))
        asg = solve_cost_matrix(cost)
        if n_t == 0:
            mismatches += asg.pairs != ()
            continue
        _, best_pairs = brute_force(cost)
        mismatches += asg.pairs != best_pairs
    passed = mismatches == 0
    record(3, passed, f"{200 - mismatches}/200 assignments equal exhaustive search")
    assert passed


# ------------------------------------------------------------------ 4. mAP oracle

def test_criterion_04_map_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(25):
        preds, truth = random_map_case(rng)
        worst = max(worst, abs(evaluate_map(preds, truth) - brute_force_map(preds, truth)))
    passed = worst < 1e-9
    record(4, passed, f"max |mAP - brute force| = {worst:.1e} over 25 cases")
    assert passed


# ------------------------------------------------------------------ 5. invariants

TINY = ModelConfig(image_size=32, backbone_channels=(8, 16, 16), d_model=16, n_heads=2, enc_layers=1,
                   dec_layers=1, ffn_dim=32, n_queries=6, d_prompt=8, n_components=4)


def _invariant_failures() -> list[str]:
    gen = torch.Generator().manual_seed(6)
    failures = []
    for _ in range(200):
        m, d = int(torch.randint(1, 9, (1,), generator=gen)), int(torch.randint(1, 9, (1,), generator=gen))
        bank = PromptComponentBank(m, d, beta=float(torch.rand(1, generator=gen)))
        with torch.no_grad():
            bank.slow.copy_(torch.randn(m, d, generator=gen))
            bank.fast.copy_(torch.randn(m, d, generator=gen))
        q = torch.randn(3, d, generator=gen) * 10
        w, p = generate_prompt(q, bank)
        if (w < 0).any() or not torch.allclose(w.sum(-1), torch.ones(3)):
            failures.append("prompt weights off the simplex")
        lo, hi = bank.slow.min(0).values, bank.slow.max(0).values
        if (p < lo - 1e-5).any() or (p > hi + 1e-5).any():
            failures.append("prompt outside the component convex hull")
        before = (bank.slow - bank.fast).norm()
        ema_update(bank)
        after = (bank.slow - bank.fast).norm()
        if not torch.isclose(after, bank.beta * before, atol=1e-5):
            failures.append("EMA does not contract by beta")
    for beta in (0.0, 1.0):
        bank = PromptComponentBank(4, 3, beta=beta)
        with torch.no_grad():
            bank.fast.add_(1.0)
        slow = bank.slow.clone()
        ema_update(bank)
        expected = bank.fast.detach() if beta == 0.0 else slow
        if not torch.equal(bank.slow, expected):
            failures.append(f"EMA limit beta={beta} violated")
    for _ in range(100):
        n_tok, n_q, dm = (int(v) for v in torch.randint(1, 8, (3,), generator=gen))
        psi = compute_soft_mask(torch.randn(n_tok, dm, generator=gen), torch.randn(n_q, dm, generator=gen))
        if psi is not None and ((psi < 0).any() or (psi > 1).any()):
            failures.append("soft mask outside [0, 1]")
        det = DetectionSet(torch.randn(6, 4, generator=gen) * 3, torch.rand(6, 4, generator=gen) * 0.5 + 0.25)
        t1, t2 = sorted(float(v) for v in torch.rand(2, generator=gen) * 0.98 + 0.01)
        if not set(confident_queries(det, t2)) <= set(confident_queries(det, t1)):
            failures.append("higher threshold keeps a query the lower one dropped")

    targets = [DomainSpec(name="dim", brightness=0.6, noise_std=0.05, seed=50)]
    source, streams = build_benchmark(BenchmarkConfig(image_size=32, n_source=12, n_target=16, targets=targets))
    cfg = TrainConfig(batch_size=4, adapt_epochs=2, disc_hidden=8, flags=Flags(False, False, False))
    a = new_cloud_state(TINY, 3, disc_hidden=8)
    b = copy.deepcopy(a)
    _, hist = adapt_cloud_model(source, streams[0].adapt, a, cfg, seed=5)
    ref = train_supervised(b.detector, source.images, source.truth(), 2, cfg.lr_detector, 5, cfg)
    if hist != ref or parameter_hash(a.detector) != parameter_hash(b.detector):
        failures.append("all-off adaptation differs from supervised fine-tuning")
    return failures


def test_criterion_05_invariants():
    failures = _invariant_failures()
    passed = not failures
    record(5, passed, "simplex, convex hull, EMA, soft-mask range, threshold monotonicity, ablation identity"
           + ("" if passed else f" -- violated: {sorted(set(failures))}"))
    assert passed, failures


# ------------------------------------------------------------------ 6-10. benchmark runs

def _mean(runs, label, metric, target="medium"):
    return fmean(getattr(runs.row(label, s, target), metric) for s in runs.SEEDS)


@pytest.mark.slow
def test_criterion_06_pseudo_label_gain(benchmark_runs):
    base = _mean(benchmark_runs, "baseline", "pseudo_label_map")
    full = _mean(benchmark_runs, "full", "pseudo_label_map")
    passed = full - base >= 2.0
    record(6, passed, f"pseudo-label mAP {base:.2f} -> {full:.2f} ({full - base:+.2f}, need >= +2.0)")
    assert passed


@pytest.mark.slow
def test_criterion_07_edge_gain(benchmark_runs):
    base = _mean(benchmark_runs, "baseline", "edge_map")
    full = _mean(benchmark_runs, "full", "edge_map")
    passed = full - base >= 1.0
    record(7, passed, f"edge mAP {base:.2f} -> {full:.2f} ({full - base:+.2f}, need >= +1.0)")
    assert passed


@pytest.mark.slow
def test_criterion_08_ablation_ordering(benchmark_runs):
    m = {r: _mean(benchmark_runs, r, "pseudo_label_map") for r in ROWS}
    slack = 0.5
    checks = [
        m["none"] <= m["dqfa"] + slack,
        m["none"] <= m["tiafa"] + slack,
        max(m["dqfa"], m["tiafa"]) <= m["dqfa+tiafa"] + slack,
        m["dqfa+tiafa"] <= m["full"] + slack,
        m["full"] - m["none"] >= 1.0,
    ]
    passed = all(checks)
    record(8, passed, "pseudo-label mAP " + ", ".join(f"{r} {m[r]:.2f}" for r in ROWS))
    assert passed, m


@pytest.mark.slow
def test_criterion_09_no_shift_control(benchmark_runs):
    deltas = [benchmark_runs.row("full", s, "noshift").pseudo_label_map
              - benchmark_runs.row("baseline", s, "noshift").pseudo_label_map for s in benchmark_runs.SEEDS]
    mean = fmean(deltas)
    passed = abs(mean) < 1.0
    record(9, passed, f"no-shift change {mean:+.2f} mean (per seed " + ", ".join(f"{d:+.2f}" for d in deltas)
           + "), need |mean| < 1.0")
    assert passed


@pytest.mark.slow
def test_criterion_10_determinism(benchmark_runs):
    fresh = type(benchmark_runs)()
    first = benchmark_runs.row("full", 0).to_dict()
    again = fresh.row("full", 0).to_dict()
    differing = sorted(k for k in first if first[k] != again[k])
    passed = not differing
    record(10, passed, "repeated full run at seed 0 reproduces every report field"
           + ("" if passed else f" -- differing: {differing}"))
    assert passed


# ------------------------------------------------------------------ further benchmark properties

@pytest.mark.slow
def test_perfect_labels_train_the_edge_at_least_as_well(benchmark_runs):
    """Ground truth injected as pseudo-labels is an upper reference for the edge model."""
    seed = 0
    stream = benchmark_runs.exp.streams[0]
    cfg = benchmark_runs.cfg.train
    edge = benchmark_runs.exp.pretrained(seed).edge
    labels = list(zip(stream.adapt.ids, stream.adapt.truth()))
    retrain_edge_model(edge, stream.adapt.images, labels, cfg, seed)
    perfect = evaluate_map(predict(edge, stream.evaluation.images), stream.evaluation.truth(), cfg.eval_iou)
    assert perfect >= benchmark_runs.row("full", seed).edge_map


@pytest.mark.slow
def test_adapted_model_still_labels_the_source(benchmark_runs):
    """Source-domain pseudo-label mAP of the adapted model beats the unadapted one on the target."""
    seed = 0
    cfg = benchmark_runs.cfg.train
    models = benchmark_runs.models("full", seed)
    source = benchmark_runs.exp.source
    _, kept = generate_pseudo_labels(models.cloud, source, cfg.adv.tau, cfg.flags)
    on_source = evaluate_map(kept, source.truth(), cfg.eval_iou)
    assert on_source > benchmark_runs.row("baseline", seed).pseudo_label_map
