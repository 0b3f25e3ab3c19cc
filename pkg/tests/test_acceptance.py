"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through the ``criterion`` fixture; the lines
are repeated in the terminal summary. Criteria 5 and 6 train the default model
many times and take several minutes on one core.
"""

import math
import time

import numpy as np
import pytest
from test_numcore import _cases, naive_matmul

from avsc import numcore as nc
from avsc.branches import bce_loss
from avsc.ceoa import (
    ContrastiveBank,
    contrastive_loss_e2o,
    contrastive_loss_o2e,
    negative_indices,
    positive_indices,
)
from avsc.fusion import MhaParams, ScenePrediction, ce_loss, init_mha_params, mha
from avsc.harness.checkpoint import Checkpoint
from avsc.harness.config import RunConfig
from avsc.harness.gradcheck import composite_grad_check
from avsc.harness.metrics import scene_metrics
from avsc.harness.report import read_csv
from avsc.harness.runners import STAT_COLUMNS, sweep_k, sweep_lambda
from avsc.harness.train import evaluate, train
from avsc.numcore import Tensor

SEEDS = range(10)
_runs: dict[tuple[str, int], float] = {}


def trained_acc(variant: str, seed: int) -> float:
    """Test accuracy of one default-config variant, cached across criteria."""
    if (variant, seed) not in _runs:
        cfg = RunConfig(seed=seed)
        if variant == "backbone":
            cfg.use_sf = cfg.use_ceoa = False
        elif variant in ("audio", "visual"):
            cfg.modality = variant
        _runs[variant, seed] = train(cfg)[0].acc
    return _runs[variant, seed]


# ---- 1: gradients -----------------------------------------------------------


def test_c1_gradient_correctness(criterion):
    start = time.perf_counter()
    worst, failures = 0.0, []
    for seed in SEEDS:
        r = np.random.default_rng([seed, 7])
        for name, (fn, inputs) in _cases(r).items():
            ts = [Tensor(x, requires_grad=True) for x in inputs]
            w = Tensor(r.standard_normal(fn(*[Tensor(x) for x in inputs]).shape))
            rep = nc.grad_check(lambda: nc.sum_(nc.mul(fn(*ts), w)), ts, h=1e-5, tol=1e-4)
            worst = max(worst, rep.max_error)
            if not rep.passed:
                failures.append(f"{name}@{seed}")
        rep = composite_grad_check(seed, "lkm" if seed % 2 == 0 else "rkm", h=1e-5, tol=1e-4)
        worst = max(worst, rep.max_error)
        if not rep.passed:
            failures.append(f"composite@{seed}")
    elapsed = time.perf_counter() - start
    ok = not failures and worst <= 1e-4 and elapsed < 30
    criterion(1, ok, f"max rel err {worst:.2e} over 10 seeds, {elapsed:.1f} s, failures {failures or 'none'}")
    assert ok


# ---- 2: closed forms --------------------------------------------------------


def _bank(P_e, N_e, P_o, N_o):
    t = lambda a: Tensor(np.asarray(a, dtype=float), requires_grad=True)
    z = np.zeros(len(P_e), dtype=int)
    return ContrastiveBank(t(P_e), t(N_e), t(P_o), t(N_o), z, z, z, z, K=len(P_e), mode="lkm")


def test_c2_closed_form_identities(criterion):
    r = np.random.default_rng(0)
    errs = {}
    errs["bce"] = max(abs(bce_loss(Tensor(np.full(C, 0.5)), (r.random(C) < 0.5).astype(float)).item() - C * math.log(2))
                      for C in (2, 12, 16, 64))
    errs["ce"] = max(abs(ce_loss(ScenePrediction(Tensor(np.zeros(C)), Tensor(np.full(C, 1 / C))), np.eye(C)[0]).item()
                         - math.log(C)) for C in (2, 4, 10))
    zero_gap, forms = 0.0, 0.0
    for s in range(20):
        r = np.random.default_rng(s)
        P_e, P_o = r.standard_normal((3, 8)), r.standard_normal((3, 8))
        b = _bank(P_e, P_e, P_o, P_o)
        zero_gap = max(zero_gap, abs(contrastive_loss_e2o(b).item() - math.log(2)),
                       abs(contrastive_loss_o2e(b).item() - math.log(2)))
        N_o = r.standard_normal((3, 8))
        pp, pn = P_e @ P_o.T, P_e @ N_o.T
        quotient = -math.log(np.mean(np.exp(pp) / (np.exp(pp) + np.exp(pn))))
        sigma = -math.log(np.mean(1 / (1 + np.exp(-(pp - pn)))))
        forms = max(forms, abs(quotient - sigma), abs(contrastive_loss_e2o(_bank(P_e, P_e, P_o, N_o)).item() - sigma))
    ok = errs["bce"] <= 1e-10 and errs["ce"] <= 1e-10 and zero_gap <= 1e-12 and forms <= 1e-12
    criterion(2, ok, f"bce {errs['bce']:.1e}, ce {errs['ce']:.1e}, zero-gap {zero_gap:.1e}, forms {forms:.1e}")
    assert ok


# ---- 3: oracle equivalence --------------------------------------------------


def sort_select(p, K):
    by_high = sorted(range(len(p)), key=lambda i: (-p[i], i))
    pos = by_high[:K]
    rest = sorted((i for i in range(len(p)) if i not in pos), key=lambda i: (p[i], i))
    return pos, rest[:K], sorted(rest)


def mha_oracle(q, k, v, p):
    outs = []
    for wq, wk, wv in zip(p.wq, p.wk, p.wv):
        Q, K, V = q @ wq.data, k @ wk.data, v @ wv.data
        s = Q @ K.T / math.sqrt(Q.shape[-1])
        a = np.exp(s - s.max(axis=-1, keepdims=True))
        outs.append((a / a.sum(axis=-1, keepdims=True)) @ V)
    return np.concatenate(outs, axis=-1) @ p.wo.data


def test_c3_oracle_equivalence(criterion):
    bank_ok = True
    for trial in range(1000):
        r = np.random.default_rng([trial, 3])
        C = int(r.integers(4, 20))
        K = int(r.integers(1, C // 2 + 1))
        p = r.random(C)
        if trial % 4 == 0:
            p = np.round(p, 1)
        want_pos, want_lkm, allowed = sort_select(p.tolist(), K)
        pos = positive_indices(p, K)
        lkm = negative_indices(p, pos, K, "lkm")[0]
        rkm = negative_indices(p, pos, K, "rkm", [np.random.default_rng(trial)])[0]
        want_rkm = sorted(np.random.default_rng(trial).choice(np.array(allowed), size=K, replace=False).tolist())
        bank_ok &= pos.tolist() == want_pos and lkm.tolist() == want_lkm and rkm.tolist() == want_rkm

    mm = 0.0
    for s in range(20):
        r = np.random.default_rng(s)
        a, b = r.standard_normal((5, 7)), r.standard_normal((7, 3))
        mm = max(mm, np.abs(nc.matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b)).max())

    att = 0.0
    for s in range(20):
        r = np.random.default_rng(s)
        params = {}
        init_mha_params(params, r, "m", 2, 2)
        p = MhaParams.from_params(params, "m", 2)
        q, k, v = r.standard_normal((3, 1)), r.standard_normal((4, 1)), r.standard_normal((4, 1))
        att = max(att, np.abs(mha(Tensor(q), Tensor(k), Tensor(v), p).data - mha_oracle(q, k, v, p)).max())

    metrics_ok = True
    for s in range(100):
        r = np.random.default_rng(s)
        target = r.integers(0, 4, size=25)
        probs = r.dirichlet(np.ones(4), size=25)
        pred = probs.argmax(axis=1).tolist()
        per = [sum(pred[i] == c for i in range(25) if target[i] == c) / sum(target == c) for c in range(4) if sum(target == c)]
        m = scene_metrics(probs, target)
        metrics_ok &= m.acc == sum(per) / len(per)
        metrics_ok &= m.logloss == pytest.approx(np.mean(-np.log(probs[np.arange(25), target])), abs=1e-15)

    ok = bank_ok and mm <= 1e-12 and att <= 1e-12 and metrics_ok
    criterion(3, ok, f"bank selection {'exact' if bank_ok else 'MISMATCH'} on 1000 vectors, matmul {mm:.1e}, "
                     f"mha {att:.1e}, metrics {'exact' if metrics_ok else 'MISMATCH'}")
    assert ok


# ---- 4: attention rows ------------------------------------------------------


def test_c4_attention_rows_sum_to_one(criterion):
    worst = 0.0
    for s in range(100):
        r = np.random.default_rng([s, 4])
        params = {}
        init_mha_params(params, r, "m", int(r.integers(1, 5)), int(r.integers(1, 9)))
        for t in params.values():
            t.data *= 4
        p = MhaParams.from_params(params, "m", len([n for n in params if ".wq" in n]))
        B, n_q, n_k = (int(x) for x in r.integers(1, 17, size=3))
        q, k = Tensor(5 * r.standard_normal((B, n_q, 1))), Tensor(5 * r.standard_normal((B, n_k, 1)))
        _, a = mha(q, k, k, p, return_attention=True)
        worst = max(worst, np.abs(a.data.sum(axis=-1) - 1).max())
    ok = worst <= 1e-12
    criterion(4, ok, f"max |row sum - 1| {worst:.1e} over 100 forward passes")
    assert ok


# ---- 5 and 6: trends --------------------------------------------------------


def test_c5_full_model_beats_backbone(criterion):
    start = time.perf_counter()
    full = [trained_acc("full", s) for s in SEEDS]
    backbone = [trained_acc("backbone", s) for s in SEEDS]

    cfg = RunConfig(seed=0, use_sf=False, use_ceoa=False)
    cfg.data.noise_sigma = 0.0
    cfg.loss_weights.l1 = cfg.loss_weights.l2 = cfg.loss_weights.l3 = cfg.loss_weights.l4 = 0.0
    cfg.epochs = 60
    history = train(cfg)[0].history
    reached = next((h["epoch"] for h in history if h["test_acc"] >= 0.95), None)
    elapsed = time.perf_counter() - start

    ok = np.mean(full) >= np.mean(backbone) and reached is not None and elapsed < 15 * 60
    criterion(5, ok, f"full {np.mean(full):.4f} vs backbone {np.mean(backbone):.4f} (10 seeds); "
                     f"scene-only zero-noise reaches 0.95 at epoch {reached}; {elapsed:.0f} s")
    assert ok


def test_c6_both_modalities_beat_each_alone(criterion):
    both = np.mean([trained_acc("full", s) for s in SEEDS])
    audio = np.mean([trained_acc("audio", s) for s in SEEDS])
    visual = np.mean([trained_acc("visual", s) for s in SEEDS])
    ok = both >= max(audio, visual)
    criterion(6, ok, f"both {both:.4f}, audio {audio:.4f}, visual {visual:.4f} (10 seeds)")
    assert ok


# ---- 7: determinism and persistence ----------------------------------------


def test_c7_determinism_and_persistence(criterion, tmp_path):
    def run(tag):
        cfg = RunConfig(seed=3, epochs=3)
        cfg.ceoa.mode = "rkm"
        _, ckpt = train(cfg, out_dir=tmp_path / tag)
        sweep_k(cfg, k_values=[2], modes=["rkm"], seeds=[3], out_dir=tmp_path / tag / "grid")
        return ckpt

    ckpt = run("a")
    run("b")
    same_csv = all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in ("history.csv", "grid/sweep_k.csv", "checkpoint.json")
    )
    back = Checkpoint.load(ckpt.save(tmp_path / "ck.json"))
    m0, m1 = evaluate(ckpt), evaluate(back)
    same_eval = m0.acc == m1.acc and m0.logloss == m1.logloss
    same_params = all(np.array_equal(ckpt.params[n], back.params[n]) for n in ckpt.params)
    ok = same_csv and same_eval and same_params
    criterion(7, ok, f"CSVs bit-identical: {same_csv}; checkpoint round-trip evaluation identical: {same_eval and same_params}")
    assert ok


# ---- 8: protocol completeness ----------------------------------------------


def _well_formed(path, key_columns, n_cells, n_seeds):
    rows = read_csv(path)
    header = list(rows[0].keys()) if rows else []
    if header != [*key_columns, *STAT_COLUMNS] or len(rows) != n_cells * (n_seeds + 2):
        return False
    for row in rows:
        if row["status"] != "ok" or not all(math.isfinite(float(row[c])) for c in ("acc", "logloss")):
            return False
    return True


def test_c8_protocol_grids(criterion, tmp_path):
    cfg = RunConfig(epochs=1).with_classes(C_e=64, C_o=64)
    k_table = sweep_k(cfg, out_dir=tmp_path)
    k_cells = {(r["mode"], r["K"]) for r in k_table.summary() if r["status"] == "ok"}
    k_ok = len(k_cells) == 14 and _well_formed(tmp_path / "sweep_k.csv", ("mode", "K"), 14, 1)

    l_table = sweep_lambda(RunConfig(epochs=1), out_dir=tmp_path)
    l_ok = sum(r["status"] == "ok" for r in l_table.summary()) == 12
    l_ok &= _well_formed(tmp_path / "sweep_lambda.csv", ("combo", "l1", "l2", "l3", "l4", "l5"), 12, 1)
    ok = k_ok and l_ok
    criterion(8, ok, f"sweep-k {len(k_cells)}/14 cells, sweep-lambda {sum(r['status'] == 'ok' for r in l_table.summary())}/12 "
                     f"combos, CSVs well-formed: {k_ok and l_ok}")
    assert ok
