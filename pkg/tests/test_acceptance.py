"""Acceptance criteria 1-9, one PASS/FAIL line per criterion.

Training stages go through the real CLI and are cached under
``.acceptance_cache/`` keyed by a hash of the package source and the stage
config, so a code change always retrains.  Set ``TEDSNET_ACCEPTANCE_FRESH=1`` to
ignore the cache.  A cold run takes a couple of hours on one CPU.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
import shutil
from pathlib import Path

import numpy as np
import pytest
from conftest import central_diff
from oracles import betti_oracle

import tedsnet
from tedsnet import fields as F
from tedsnet import losses as L
from tedsnet import network as N
from tedsnet import ndtensor as nt
from tedsnet import trainer as TR
from tedsnet.cli import main as cli
from tedsnet.config import ModelConfig
from tedsnet.synthdata import load_dataset, read_pgm
from tedsnet.topology import betti_numbers

ROOT = Path(__file__).resolve().parent.parent
CACHE = ROOT / ".acceptance_cache"
SRC = Path(tedsnet.__file__).parent
FRESH = os.environ.get("TEDSNET_ACCEPTANCE_FRESH", "0") not in ("", "0")

# desk-scale run: every default (500/100/100 at 64x96, 30 epochs)
DESK = ""
# integration-layer sweep: one shared short schedule for every T
SWEEP_DATA = "n_train = 200\nn_val = 20\nn_test = 50\n"
SWEEP = SWEEP_DATA + "epochs = 8\n"
# determinism check
SMALL = "n_train = 10\nn_val = 3\nn_test = 4\nepochs = 1\n"

CRITERION_RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    CRITERION_RESULTS[n] = line
    print("\n" + line, flush=True)


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(SRC.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def stage(name: str, config_text: str, build) -> Path:
    """Run ``build(dir, config_path)`` once per (source, config); reuse the result otherwise."""
    key = hashlib.sha256((_source_hash() + name + config_text).encode()).hexdigest()
    d = CACHE / name
    if not FRESH and (d / "key.txt").is_file() and (d / "key.txt").read_text() == key:
        return d
    shutil.rmtree(d, ignore_errors=True)
    d.mkdir(parents=True)
    cfg = d / "config.txt"
    cfg.write_text(config_text)
    build(d, cfg)
    (d / "key.txt").write_text(key)
    return d


def _must(rc: int) -> None:
    assert rc == 0, f"CLI exited with {rc}"


def desk_data() -> Path:
    return stage("desk_data", DESK, lambda d, c: _must(cli(["gen-data", "--config", str(c), "--out", str(d / "data")]))) / "data"


def desk_run(name: str = "desk_full", overrides: tuple[str, ...] = ()) -> Path:
    data = desk_data()
    text = DESK + "".join(f"{o.replace('=', ' = ')}\n" for o in overrides)

    def build(d, c):
        _must(cli(["-v", "train", "--config", str(c), "--data", str(data), "--out", str(d)]))
        _must(cli(["eval", "--ckpt", str(d / "best.ckpt"), "--data", str(data), "--out", str(d / "eval")]))

    return stage(name, text, build)


def read_metrics(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def num(v: str) -> float:
    return math.nan if v == "NA" else float(v)


# ---------------------------------------------------------------------------
# 1. diffeomorphism guarantee
# ---------------------------------------------------------------------------


def test_criterion_1_diffeomorphism():
    cfg = ModelConfig()
    h, w = 64, 96
    rng = np.random.default_rng(2024)
    bad_random = 0
    for _ in range(1000):
        for gh, gw in ((h // 8, w // 8), (h // 2, w // 2)):
            v = F.diffeo_activation(nt.Tensor(rng.normal(0.0, 0.1, (2, gh, gw))))
            phi = F.super_upsample(F.integrate_ss(v, cfg.T, cfg.smoothing_cfg), 2 * h, 2 * w)
            bad_random += F.jacobian_report(phi.data).frac_nonpositive != 0.0

    run = desk_run()
    ds = load_dataset(desk_data())
    model = N.load_checkpoint(run / "best.ckpt", cfg)
    results = TR.evaluate_samples(model, ds.test)
    bad_trained = sum(r.pct_nonpos_bulk != 0.0 or r.pct_nonpos_ft != 0.0 for r in results)
    min_det = min(min(r.min_det_bulk, r.min_det_ft) for r in results)
    ok = bad_random == 0 and bad_trained == 0
    report(1, ok, f"random fields with folds {bad_random}/1000; trained test samples with folds {bad_trained}/{len(results)}; min det {min_det:.4f}")
    assert ok


def test_random_parameter_draws_keep_fields_diffeomorphic():
    # heads at std 0.01 give |u| up to about 0.3; larger heads (|u| near 1) can fold, see the decisions ledger
    cfg = ModelConfig()
    h, w = 64, 96
    rng = np.random.default_rng(100)
    prior = TR.prior_for(cfg, h, w).astype(float)
    worst = math.inf
    for i in range(100):
        m = N.build(cfg, h, w, seed=10_000 + i)
        for k, p in m.params.items():
            if ".head." in k:
                p.data = rng.normal(0.0, 0.01, p.shape)
        with nt.no_grad():
            out = N.teds_forward(m, rng.random((1, 1, h, w)), prior)
        worst = min(worst, F.jacobian_report(out.phi_bulk.data[0]).min_det, F.jacobian_report(out.phi_ft.data[0]).min_det)
    assert worst > 0


# ---------------------------------------------------------------------------
# 2-3. desk-scale topology and segmentation quality
# ---------------------------------------------------------------------------


def test_criterion_2_topology():
    run = desk_run()
    row = read_metrics(run / "eval" / "metrics.csv")[0]
    preds = sorted((run / "eval").glob("pred_*.pgm"))
    recount = sum(betti_oracle(read_pgm(p) > 127) != (1, 1) for p in preds)
    bad, n = int(row["incorrect_topology"]), int(row["n"])
    ok = bad == 0 and n == 100 and recount == 0
    report(2, ok, f"incorrect topology {bad}/{n}, flood-fill recount {recount}/{len(preds)}")
    assert ok


def test_criterion_3_quality():
    run = desk_run()
    row = read_metrics(run / "eval" / "metrics.csv")[0]
    dice, hd = num(row["dice_mean"]), num(row["hd_mean"])
    ok = dice >= 0.80 and hd <= 5.0
    report(3, ok, f"Dice {dice:.4f} +/- {num(row['dice_sd']):.4f} (need >= 0.80), HD {hd:.3f} +/- {num(row['hd_sd']):.3f} (need <= 5)")
    assert ok


def test_desk_training_loss_decreases():
    log = read_metrics(desk_run() / "log.csv")
    assert num(log[-1]["total"]) < num(log[0]["total"])


# ---------------------------------------------------------------------------
# 4. ablation trends
# ---------------------------------------------------------------------------


def test_criterion_4_ablations():
    full = read_metrics(desk_run() / "eval" / "metrics.csv")[0]
    a2 = read_metrics(desk_run("desk_A2", ("smoothing=false",)) / "eval" / "metrics.csv")[0]
    a3 = read_metrics(desk_run("desk_A3", ("use_grad_loss=false",)) / "eval" / "metrics.csv")[0]

    def folds(r):
        return max(num(r["pct_nonpos_bulk_mean"]), num(r["pct_nonpos_ft_mean"]))

    ok_a2 = folds(a2) > 0
    ok_a3 = int(a3["incorrect_topology"]) > 0
    ok_full = folds(full) == 0 and int(full["incorrect_topology"]) == 0
    detail = (
        f"A2 folds {folds(a2):.4f}% ({'ok' if ok_a2 else 'no folds'}); "
        f"A3 incorrect topology {a3['incorrect_topology']}/{a3['n']} ({'ok' if ok_a3 else 'none'}); "
        f"full folds {folds(full):.4f}% and topology {full['incorrect_topology']}/{full['n']}"
    )
    ok = ok_a2 and ok_a3 and ok_full
    report(4, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 5. integration-layer sweep
# ---------------------------------------------------------------------------


def test_criterion_5_layer_sweep():
    data = stage("sweep_data", SWEEP_DATA, lambda d, c: _must(cli(["gen-data", "--config", str(c), "--out", str(d / "data")]))) / "data"
    run = stage(
        "sweep_layers",
        SWEEP,
        lambda d, c: _must(cli(["sweep", "--which", "layers", "--config", str(c), "--data", str(data), "--out", str(d)])),
    )
    rows = read_metrics(run / "layers.csv")
    T = [int(r["T"]) for r in rows]
    viol = {int(r["T"]): max(num(r["pct_nonpos_bulk_mean"]), num(r["pct_nonpos_ft_mean"])) > 0 for r in rows}
    low_clean = all(not viol[t] for t in T if t <= 8)
    bad = [t for t in T if viol[t]]
    good = [t for t in T if not viol[t]]
    monotone = not bad or min(bad) > max(good, default=-1)
    ok = T == list(range(2, 17)) and low_clean and monotone
    dice = ", ".join(f"T{r['T']}:{num(r['dice_mean']):.2f}" for r in rows)
    report(5, ok, f"T with folds {bad or 'none'}; T<=8 clean {low_clean}; monotone {monotone}; Dice {dice}")
    assert ok


# ---------------------------------------------------------------------------
# 6. gradient correctness
# ---------------------------------------------------------------------------


def _grad_setup(seed: int):
    cfg = ModelConfig(T=8)
    h, w = 32, 48
    rng = np.random.default_rng(seed)
    model = N.build(cfg, h, w, seed=seed)
    # zero heads would put every sample exactly on a grid node (a kink of bilinear interpolation)
    for k, p in model.params.items():
        if ".head." in k:
            p.data = rng.normal(0.0, 0.05, p.shape)
    x = rng.random((2, 1, h, w))
    y = np.stack([np.roll(TR.prior_for(cfg, h, w), s, axis=1) for s in (2, -3)])
    prior = TR.prior_for(cfg, h, w).astype(float)

    def loss():
        out = N.teds_forward(model, x, prior)
        return L.total_loss(out.y_soft, y, out.phi_bulk, out.phi_ft, cfg.beta, cfg.grad_units)[0]

    for p in model.parameters():
        p.zero_grad()
    loss().backward()
    return model, loss, rng


def _rel(ad: float, fd: float) -> float:
    return abs(ad - fd) / max(abs(ad), abs(fd), 1e-300)


def test_criterion_6_gradients():
    model, loss, rng = _grad_setup(6)
    names = list(model.params)
    sizes = np.array([model.params[k].data.size for k in names])
    worst, where = 0.0, ""
    # 20 scalar parameters drawn uniformly over all entries of the model
    for flat in rng.choice(sizes.sum(), size=20, replace=False):
        t = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        p = model.params[names[t]]
        idx = np.unravel_index(int(flat - (sizes[:t].sum())), p.shape)
        fd = central_diff(lambda: loss().item(), p.data, idx, 1e-5)
        err = _rel(p.grad[idx], fd)
        if err >= worst:
            worst, where = err, f"{names[t]}{tuple(int(i) for i in idx)}"
    ok = worst < 1e-5
    report(6, ok, f"worst relative error over 20 parameters {worst:.2e} at {where} (need < 1e-5)")
    assert ok


def test_velocity_head_gradients():
    # head parameters move every sample point at once; a 1e-5 step can straddle interpolation kinks,
    # so they are checked with a smaller step
    model, loss, rng = _grad_setup(7)
    for name in ("bulk.head.w", "bulk.head.b", "ft.head.w", "ft.head.b"):
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        fd = central_diff(lambda: loss().item(), p.data, idx, 1e-7)
        assert _rel(p.grad[idx], fd) < 1e-5, name


# ---------------------------------------------------------------------------
# 7. closed-form suite
# ---------------------------------------------------------------------------


def test_criterion_7_closed_form():
    checks = {}
    checks["activation"] = abs(F.diffeo_activation(nt.Tensor(np.array([1.0]))).data[0] - 0.5 * np.tanh(1.0)) < 1e-15 and abs(
        F.diffeo_activation(nt.Tensor(np.array([1.0]))).data[0] - 0.380797077977882
    ) < 1e-12

    c = np.zeros((2, 24, 24))
    c[:] = 0.3
    d = F.integrate_ss(nt.Tensor(c), 3, F.SmoothingConfig(enabled=False)).data
    checks["doubling"] = np.abs(d[:, 8:-8, 8:-8] - 2.4).max() <= 1e-9

    img = np.random.default_rng(7).random((9, 13))
    checks["identity_warp"] = np.array_equal(F.warp(nt.Tensor(img), nt.Tensor(np.zeros((2, 9, 13)))).data, img)

    k = F.SmoothingConfig().kernel2d()
    const = np.zeros((2, 10, 12))
    const[0], const[1] = 1.5, -0.25
    sm = F.gaussian_smooth(nt.Tensor(const)).data
    checks["gaussian"] = abs(k.sum() - 1.0) < 1e-15 and np.abs(sm[0] - 1.5).max() < 1e-14 and np.abs(sm[1] + 0.25).max() < 1e-14

    r, cc = np.meshgrid(np.arange(9.0), np.arange(11.0), indexing="ij")
    det = F.jacobian_determinant(np.stack([0.1 * (r - 4.5), 0.1 * (cc - 5.5)]))
    fold = F.jacobian_determinant(np.stack([-2.0 * r, np.zeros_like(r)]))
    checks["jacobian"] = np.abs(det - 1.21).max() < 1e-14 and np.all(fold <= 0)

    a = np.zeros((6, 6), bool)
    b = np.zeros((6, 6), bool)
    a[0, 0] = b[3, 4] = True
    checks["hausdorff"] = L.hausdorff(a, b) == 5.0

    failed = [k for k, v in checks.items() if not v]
    report(7, not failed, f"{len(checks) - len(failed)}/{len(checks)} closed-form checks" + (f", failed {failed}" if failed else ""))
    assert not failed


# ---------------------------------------------------------------------------
# 8. topology oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_8_topology_oracle():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(1000):
        m = rng.random((16, 16)) < rng.uniform(0.1, 0.9)
        mismatches += betti_numbers(m) != betti_oracle(m)
    report(8, mismatches == 0, f"{mismatches} discrepancies over 1000 random 16x16 masks")
    assert mismatches == 0


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "small.txt"
    cfg.write_text(SMALL)
    _must(cli(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "data")]))
    outs = []
    for i, c in enumerate((cfg, None)):
        run = tmp_path / f"run{i}"
        # the second run starts from the first run's resolved config
        c = c or tmp_path / "run0" / "resolved_config.txt"
        _must(cli(["-v", "train", "--config", str(c), "--data", str(tmp_path / "data"), "--out", str(run)]))
        _must(cli(["eval", "--ckpt", str(run / "best.ckpt"), "--data", str(tmp_path / "data"), "--out", str(run / "eval")]))
        outs.append(((run / "best.ckpt").read_bytes(), (run / "eval" / "metrics.csv").read_bytes()))
    ok = outs[0] == outs[1]
    report(9, ok, f"checkpoint identical {outs[0][0] == outs[1][0]}, metrics.csv identical {outs[0][1] == outs[1][1]}")
    assert ok


@pytest.fixture(scope="module", autouse=True)
def summary():
    yield
    if CRITERION_RESULTS:
        print("\n" + "\n".join(CRITERION_RESULTS[k] for k in sorted(CRITERION_RESULTS)), flush=True)
