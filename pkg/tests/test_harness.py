import json
import warnings

import numpy as np
import pytest

from avsc.cli import main
from avsc.errors import ConfigError, ShapeError
from avsc.harness.checkpoint import Checkpoint
from avsc.harness.config import RunConfig, preset
from avsc.harness.gradcheck import tiny_config
from avsc.harness.metrics import accuracy, logloss, scene_metrics
from avsc.harness.optim import AdamW, AdamWState, adamw_step
from avsc.harness.projection import export_projection, project_rows, top_components
from avsc.harness.report import read_csv, read_meta, render_csv, write_csv
from avsc.harness.runners import (
    K_GRID,
    ablate,
    ablate_modality,
    default_lambda_combos,
    sweep_k,
    sweep_lambda,
)
from avsc.harness.train import evaluate, train
from avsc.numcore import Tensor


def small_cfg(epochs=2, seed=0, **kw) -> RunConfig:
    cfg = tiny_config(seed)
    cfg.data.n = 24
    cfg.epochs = epochs
    cfg.batch_size = 8
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


# ---- optimizer --------------------------------------------------------------


def adamw_oracle(p, g, lr, b1, b2, eps, wd, steps):
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * ((m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps) + wd * p)
    return p


def test_adamw_matches_scalar_oracle(rng):
    p0, g = rng.standard_normal(5), rng.standard_normal(5)
    t = Tensor(p0.copy(), requires_grad=True)
    state = AdamWState()
    for _ in range(3):
        adamw_step([t], [g], state, lr=0.01, weight_decay=0.1)
    np.testing.assert_allclose(t.data, adamw_oracle(p0, g, 0.01, 0.9, 0.999, 1e-8, 0.1, 3), rtol=0, atol=1e-15)
    assert state.step == 3


def test_first_step_moves_by_lr_times_sign(rng):
    # bias correction makes the first update lr * g / (|g| + eps)
    g = rng.standard_normal(4)
    t = Tensor(np.zeros(4), requires_grad=True)
    adamw_step([t], [g], AdamWState(), lr=1e-3, weight_decay=0.0)
    np.testing.assert_allclose(t.data, -1e-3 * g / (np.abs(g) + 1e-8), atol=1e-18)


def test_zero_grad_zero_param_is_fixed_point():
    t = Tensor(np.zeros(3), requires_grad=True)
    opt = AdamW([t], lr=0.1)
    for _ in range(5):
        opt.zero_grad()
        opt.step()
    assert np.array_equal(t.data, np.zeros(3))


def test_weight_decay_alone_shrinks_geometrically():
    t = Tensor(np.ones(2), requires_grad=True)
    opt = AdamW([t], lr=0.1, weight_decay=0.5)
    for _ in range(3):
        opt.zero_grad()
        opt.step()
    np.testing.assert_allclose(t.data, 0.95**3, atol=1e-15)


def test_adamw_shape_error():
    with pytest.raises(ShapeError):
        adamw_step([Tensor(np.zeros(3))], [np.zeros(2)], AdamWState(), lr=0.1)


# ---- metrics ----------------------------------------------------------------


def recount_macro(pred, target, C):
    accs = []
    for c in range(C):
        idx = [i for i, t in enumerate(target) if t == c]
        if idx:
            accs.append(sum(pred[i] == c for i in idx) / len(idx))
    return sum(accs) / len(accs)


def test_metrics_match_recount(rng):
    for _ in range(50):
        target = rng.integers(0, 5, size=30)
        probs = rng.dirichlet(np.ones(5), size=30)
        pred = probs.argmax(axis=1)
        m = scene_metrics(probs, target)
        assert m.acc == recount_macro(pred.tolist(), target.tolist(), 5)
        assert scene_metrics(probs, target, "micro").acc == sum(int(a == b) for a, b in zip(pred, target)) / 30
        want = sum(-np.log(probs[i, target[i]]) for i in range(30)) / 30
        assert abs(m.logloss - want) <= 1e-12


def test_constant_predictor_has_chance_macro_accuracy():
    target = np.array([0, 0, 0, 1, 2, 3, 3])
    assert accuracy(np.zeros(7, dtype=int), target, 4) == 0.25


def test_perfect_and_uniform_predictors():
    target = np.array([0, 1, 2, 1])
    onehot = np.eye(3)[target]
    m = scene_metrics(onehot, target)
    assert m.acc == 1.0 and m.logloss <= 1e-12
    assert abs(logloss(np.full((4, 3), 1 / 3), target) - np.log(3)) <= 1e-12


# ---- config, report, checkpoint --------------------------------------------


def test_config_json_round_trip(tmp_path):
    cfg = preset("paper")
    cfg.ceoa.mode = "rkm"
    back = RunConfig.load(cfg.save(tmp_path / "c.json"))
    assert back.to_dict() == cfg.to_dict()


def test_config_unknown_keys_rejected():
    raw = RunConfig().to_dict()
    raw["fusion"]["heads"] = 3
    with pytest.raises(ConfigError, match="unknown keys"):
        RunConfig.from_dict(raw)
    with pytest.raises(ConfigError):
        preset("huge")


def test_config_cross_checks():
    cfg = RunConfig()
    cfg.audio.C_e = 5
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = RunConfig(modality="smell")
    with pytest.raises(ConfigError):
        cfg.validate()


def test_csv_floats_round_trip(tmp_path, rng):
    vals = rng.standard_normal(20) * 10.0 ** rng.integers(-8, 8, size=20)
    path = write_csv(tmp_path / "x.csv", ("i", "v"), [{"i": i, "v": float(v)} for i, v in enumerate(vals)],
                     meta={"lr": 1e-3})
    rows = read_csv(path)
    assert [float(r["v"]) for r in rows] == vals.tolist()
    assert read_meta(path) == {"lr": "0.001"}


def test_csv_rejects_unknown_columns():
    with pytest.raises(KeyError):
        render_csv(("a",), [{"a": 1, "b": 2}])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    metrics, ckpt = train(small_cfg(epochs=1))
    back = Checkpoint.load(ckpt.save(tmp_path / "ck.json"))
    assert back.params.keys() == ckpt.params.keys()
    for name in ckpt.params:
        assert np.array_equal(back.params[name], ckpt.params[name])
    a, b = evaluate(ckpt), evaluate(back)
    assert a.acc == b.acc == metrics.acc
    assert a.logloss == b.logloss == metrics.logloss


# ---- training ---------------------------------------------------------------


def test_zero_epochs_returns_initial_metrics():
    m, _ = train(small_cfg(epochs=0))
    assert len(m.history) == 1
    assert m.history[0]["L"] is None
    assert 0.0 <= m.acc <= 1.0


def test_same_seed_same_history(tmp_path):
    a, _ = train(small_cfg(epochs=2), out_dir=tmp_path / "a")
    b, _ = train(small_cfg(epochs=2), out_dir=tmp_path / "b")
    assert a.history == b.history
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()
    c, _ = train(small_cfg(epochs=2, seed=1))
    assert c.history != a.history


def test_rkm_training_is_deterministic():
    cfg = small_cfg(epochs=2)
    cfg.ceoa.mode = "rkm"
    assert train(cfg)[0].history == train(cfg.copy())[0].history


def test_training_reduces_scene_loss():
    cfg = small_cfg(epochs=8)
    m, _ = train(cfg)
    assert m.history[-1]["L_s"] < m.history[1]["L_s"]


# ---- runners ----------------------------------------------------------------


def test_ablate_table_shape_and_backbone_equivalence(tmp_path):
    cfg = small_cfg(epochs=1)
    table = ablate(cfg, seeds=[0, 1], out_dir=tmp_path)
    assert [r["variant"] for r in table.summary()] == ["backbone", "sf", "ceoa", "full"]
    assert len(table.rows) == 4 * (2 + 2)
    plain = cfg.copy()
    plain.use_sf = plain.use_ceoa = False
    plain.seed = 1
    assert table.rows[1]["acc"] == train(plain)[0].acc
    rows = read_csv(tmp_path / "ablate.csv")
    assert len(rows) == len(table.rows)
    assert read_meta(tmp_path / "ablate.csv")["optimizer"] == "adamw"
    assert (tmp_path / "ablate" / "variant-full_seed-1" / "checkpoint.json").exists()


def test_sd_row_is_sample_sd():
    table = ablate_modality(small_cfg(epochs=1), seeds=[0, 1, 2])
    for mod in ("audio", "visual", "both"):
        accs = [r["acc"] for r in table.rows if r["modality"] == mod and r["stat"] == "run"]
        sd = [r["acc"] for r in table.rows if r["modality"] == mod and r["stat"] == "sd"][0]
        assert sd == pytest.approx(np.std(accs, ddof=1), abs=1e-15)


def test_sweep_k_bad_cell_is_recorded_and_grid_continues():
    cfg = small_cfg(epochs=1)
    table = sweep_k(cfg, k_values=[1, 3], modes=["lkm"])
    status = {r["K"]: r["status"] for r in table.summary()}
    assert status == {1: "ok", 3: "config_error"}
    assert "K" in [r for r in table.summary() if r["K"] == 3][0]["error"]


def test_sweep_lambda_all_ones_equals_default_training():
    cfg = small_cfg(epochs=1)
    table = sweep_lambda(cfg, combos=[[1, 1, 1, 1, 1], [0, 0, 0, 0, 1]])
    assert table.mean_acc(combo=1) == train(cfg)[0].acc
    scene_only = cfg.copy()
    scene_only.loss_weights.l1 = scene_only.loss_weights.l2 = 0.0
    scene_only.loss_weights.l3 = scene_only.loss_weights.l4 = 0.0
    assert table.mean_acc(combo=2) == train(scene_only)[0].acc


def test_zero_alignment_weights_match_ceoa_off():
    cfg = small_cfg(epochs=1)
    off = cfg.copy()
    off.use_ceoa = False
    zero = cfg.copy()
    zero.loss_weights.l3 = zero.loss_weights.l4 = 0.0
    assert train(off)[0].history == train(zero)[0].history


def test_sweep_lambda_rejects_negative_weights_up_front():
    with pytest.raises(ConfigError):
        sweep_lambda(small_cfg(), combos=[[1, 1, 1, 1, 1], [1, -1, 1, 1, 1]])


def test_shipped_lambda_combos():
    combos = default_lambda_combos()
    assert len(combos) == 12
    assert [combos[5][f"l{j}"] for j in range(1, 6)] == [0.25, 0.5, 0.25, 0.5, 1]
    assert all(c["l5"] == 1 for c in combos)
    assert K_GRID == (1, 5, 10, 15, 20, 25, 30)


# ---- projection -------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_top_components_match_singular_values(seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((12, 5)) * np.array([5, 3, 1, 0.5, 0.1])
    X -= X.mean(axis=0)
    vals, vecs = top_components(X, 2)
    _, sv, Vt = np.linalg.svd(X)
    np.testing.assert_allclose(vals, sv[:2] ** 2 / 12, rtol=1e-10)
    np.testing.assert_allclose(np.abs(vecs @ Vt[:2].T), np.eye(2), atol=1e-8)
    assert all(v[np.argmax(np.abs(v))] > 0 for v in vecs)


def test_two_dim_rows_keep_pairwise_distances(rng):
    X = rng.standard_normal((6, 2))
    coords, _, _ = project_rows(X)
    d = lambda A: np.linalg.norm(A[:, None] - A[None], axis=-1)
    np.testing.assert_allclose(d(coords), d(X), atol=1e-12)


def test_rank_one_rows_warn_and_return_one_axis():
    X = np.outer(np.arange(5.0), [1.0, 2.0, -1.0])
    with pytest.warns(RuntimeWarning):
        coords, vals, _ = project_rows(X)
    assert coords.shape == (5, 1) and len(vals) == 1


def test_export_projection_writes_all_rows(tmp_path):
    _, ckpt = train(small_cfg(epochs=1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        proj = export_projection(ckpt, tmp_path / "p.csv")
    rows = read_csv(tmp_path / "p.csv")
    assert len(rows) == 8
    assert [r["modality"] for r in rows] == ["event"] * 4 + ["object"] * 4
    assert float(rows[0]["x"]) == proj.coords[0, 0]


# ---- command line -----------------------------------------------------------


@pytest.fixture
def cfg_file(tmp_path):
    return small_cfg(epochs=1).save(tmp_path / "tiny.json")


def test_cli_train_evaluate_project(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert (out / "checkpoint.json").exists() and (out / "history.csv").exists()
    assert main(["evaluate", "--checkpoint", str(out / "checkpoint.json"), "--out", str(out)]) == 0
    assert read_csv(out / "evaluate_test.csv")[0]["split"] == "test"
    assert main(["project-weights", "--checkpoint", str(out / "checkpoint.json")]) == 0
    assert (out / "projection.csv").exists()
    assert "test acc" in capsys.readouterr().out


def test_cli_grids(tmp_path, cfg_file):
    assert main(["sweep-k", "--config", str(cfg_file), "--k", "1", "2", "--out", str(tmp_path)]) == 0
    assert len([r for r in read_csv(tmp_path / "sweep_k.csv") if r["stat"] == "run"]) == 4
    combos = tmp_path / "combos.json"
    combos.write_text(json.dumps([[1, 1, 1, 1, 1]]))
    assert main(["sweep-lambda", "--config", str(cfg_file), "--combos", str(combos), "--out", str(tmp_path)]) == 0
    assert main(["ablate", "--config", str(cfg_file), "--seeds", "1", "--out", str(tmp_path)]) == 0
    assert main(["ablate-modality", "--config", str(cfg_file), "--seeds", "1", "--out", str(tmp_path)]) == 0


def test_cli_gradcheck_and_gen_data(tmp_path, cfg_file):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(tmp_path / "d.npz")]) == 0
    assert (tmp_path / "d.npz").exists()


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochz": 3}))
    assert main(["train", "--config", str(bad)]) == 2
    assert "unknown keys" in capsys.readouterr().err


def test_cli_full_scale_preset_overrides_optimizer(tmp_path, cfg_file):
    from avsc.cli import build_parser, load_config

    args = build_parser().parse_args(["train", "--config", str(cfg_file), "--preset", "paper", "--epochs", "3"])
    cfg = load_config(args)
    assert cfg.optim.lr == 5e-6 and cfg.batch_size == 16 and cfg.epochs == 3
