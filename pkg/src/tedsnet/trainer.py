"""Training loop, evaluation harness and the ablation / sweep runners."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import fields as F
from . import losses as L
from . import ndtensor as nt
from . import network as N
from .config import ModelConfig, RunConfig
from .synthdata import Dataset, SynthSample, make_prior, write_pgm
from .topology import threshold, topology_correct

log = logging.getLogger(__name__)

EVAL_COLUMNS = [
    "dice_mean",
    "dice_sd",
    "hd_mean",
    "hd_sd",
    "pct_nonpos_bulk_mean",
    "pct_nonpos_bulk_sd",
    "pct_nonpos_ft_mean",
    "pct_nonpos_ft_sd",
    "incorrect_topology",
    "n",
]
LOG_COLUMNS = ["epoch", "dice_loss", "grad_bulk", "grad_ft", "total", "val_dice"]


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, fields: dict[str, np.ndarray]):
        super().__init__(msg)
        self.fields = fields


@dataclass
class SampleResult:
    index: int
    dice: float
    hd: float  # nan when undefined
    b0: int
    b1: int
    topology_ok: bool
    pct_nonpos_bulk: float  # nan when the branch is disabled
    pct_nonpos_ft: float
    min_det_bulk: float
    min_det_ft: float
    pred: np.ndarray


@dataclass
class EvalRow:
    dice_mean: float
    dice_sd: float
    hd_mean: float
    hd_sd: float
    pct_nonpos_bulk_mean: float
    pct_nonpos_bulk_sd: float
    pct_nonpos_ft_mean: float
    pct_nonpos_ft_sd: float
    incorrect_topology: int
    n: int
    hd_missing: int = 0
    min_det: float = math.nan

    def csv_values(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in EVAL_COLUMNS]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return f"{v:.6f}"


def _mean_sd(values) -> tuple[float, float]:
    a = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if a.size == 0:
        return math.nan, math.nan
    return float(a.mean()), float(a.std())


def prior_for(cfg: ModelConfig, h: int, w: int) -> np.ndarray:
    return make_prior(h, w, cfg.radius_for(h), cfg.prior_thickness)


def _batch(samples: list[SynthSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.image for s in samples]).astype(np.float64)
    y = np.stack([s.label for s in samples]).astype(np.float64)
    return x, y


def _loss(cfg: ModelConfig, out: N.TedsOutput, y):
    beta = cfg.beta if cfg.use_grad_loss else 0.0
    return L.total_loss(out.y_soft, y, out.phi_bulk, out.phi_ft, beta, cfg.grad_units)


def predict(model: N.TedsModel, samples: list[SynthSample], prior, batch: int = 10):
    """Evaluation-mode forward over ``samples``; yields (sample, y_soft, phi_bulk, phi_ft, y_bulk)."""
    with nt.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start : start + batch]
            x, _ = _batch(chunk)
            out = N.teds_forward(model, x, prior, training=False)
            for i, s in enumerate(chunk):
                yield (
                    s,
                    out.y_soft.data[i],
                    None if out.phi_bulk is None else out.phi_bulk.data[i],
                    None if out.phi_ft is None else out.phi_ft.data[i],
                    out.y_bulk.data[i],
                )


def val_dice(model, samples, prior) -> float:
    if not samples:
        return math.nan
    return float(np.mean([L.dice_metric(threshold(y), s.label) for s, y, *_ in predict(model, samples, prior)]))


def epoch0_loss(model: N.TedsModel, samples: list[SynthSample], prior, batch: int) -> L.LossBreakdown:
    """Objective of the model as-is (evaluation mode) averaged over ``samples``."""
    parts = []
    with nt.no_grad():
        for start in range(0, len(samples), batch):
            x, y = _batch(samples[start : start + batch])
            out = N.teds_forward(model, x, prior, training=False)
            parts.append((_loss(model.cfg, out, y)[1], len(x)))
    return _average([p for p, _ in parts], [n for _, n in parts])


def _average(rows: list[L.LossBreakdown], weights) -> L.LossBreakdown:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    avg = {k: float(sum(getattr(r, k) * wi for r, wi in zip(rows, w))) for k in ("dice_loss", "grad_bulk", "grad_ft", "total")}
    return L.LossBreakdown(beta=rows[0].beta, **avg)


def train(
    cfg: ModelConfig,
    dataset: Dataset,
    ckpt_dir: Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[N.TedsModel, list[dict]]:
    """Minimise Dice + beta * gradient penalty with Adam; keeps the best-validation-Dice weights."""
    h, w = dataset.cfg.h, dataset.cfg.w
    prior = prior_for(cfg, h, w)
    model = N.build(cfg, h, w)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    opt = nt.Adam(model.parameters(), lr=cfg.lr)
    train_set = dataset.train
    if not train_set:
        raise ValueError("dataset has no training samples")

    history: list[dict] = []
    start = epoch0_loss(model, train_set, prior, cfg.batch)
    best = val_dice(model, dataset.val, prior)
    best_params = {k: p.data.copy() for k, p in model.params.items()}
    row = dict(epoch=0, **_row(start), val_dice=best)
    history.append(row)
    if on_epoch:
        on_epoch(row)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        parts, sizes = [], []
        for b in range(0, len(order), cfg.batch):
            x, y = _batch([train_set[i] for i in order[b : b + cfg.batch]])
            out = N.teds_forward(model, x, prior, training=True, rng=rng)
            loss, bd = _loss(cfg, out, y)
            if not np.isfinite(loss.item()):
                dump = {k: getattr(out, k).data for k in ("phi_bulk", "phi_ft") if getattr(out, k) is not None}
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b // cfg.batch}", dump)
            opt.zero_grad()
            loss.backward()
            opt.step()
            parts.append(bd)
            sizes.append(len(x))
        vd = val_dice(model, dataset.val, prior)
        row = dict(epoch=epoch, **_row(_average(parts, sizes)), val_dice=vd)
        history.append(row)
        log.info("epoch %d: %s", epoch, row)
        if on_epoch:
            on_epoch(row)
        if not math.isnan(vd) and vd > best:
            best = vd
            best_params = {k: p.data.copy() for k, p in model.params.items()}
        elif math.isnan(vd):
            best_params = {k: p.data.copy() for k, p in model.params.items()}

    for k, arr in best_params.items():
        model.params[k].data = arr
    if ckpt_dir is not None:
        N.save_checkpoint(model, Path(ckpt_dir) / "best.ckpt")
    return model, history


def _row(bd: L.LossBreakdown) -> dict:
    return dict(dice_loss=bd.dice_loss, grad_bulk=bd.grad_bulk, grad_ft=bd.grad_ft, total=bd.total)


def evaluate_samples(model: N.TedsModel, samples: list[SynthSample], prior=None) -> list[SampleResult]:
    if prior is None:
        prior = prior_for(model.cfg, model.h, model.w)
    results = []
    for s, y_soft, phi_b, phi_f, _ in predict(model, samples, prior):
        pred = threshold(y_soft)
        try:
            hd = L.hausdorff(pred, s.label)
        except L.UndefinedMetricError:
            hd = math.nan
        topo = topology_correct(pred)
        jb = F.jacobian_report(phi_b) if phi_b is not None else None
        jf = F.jacobian_report(phi_f) if phi_f is not None else None
        results.append(
            SampleResult(
                index=int(s.meta.get("index", len(results))),
                dice=L.dice_metric(pred, s.label),
                hd=hd,
                b0=topo.b0,
                b1=topo.b1,
                topology_ok=topo.correct and pred.any(),
                pct_nonpos_bulk=100.0 * jb.frac_nonpositive if jb else math.nan,
                pct_nonpos_ft=100.0 * jf.frac_nonpositive if jf else math.nan,
                min_det_bulk=jb.min_det if jb else math.nan,
                min_det_ft=jf.min_det if jf else math.nan,
                pred=pred,
            )
        )
    return results


def aggregate(results: list[SampleResult]) -> EvalRow:
    d = _mean_sd([r.dice for r in results])
    hd = _mean_sd([r.hd for r in results])
    pb = _mean_sd([r.pct_nonpos_bulk for r in results])
    pf = _mean_sd([r.pct_nonpos_ft for r in results])
    dets = [v for r in results for v in (r.min_det_bulk, r.min_det_ft) if not math.isnan(v)]
    return EvalRow(
        *d,
        *hd,
        *pb,
        *pf,
        incorrect_topology=sum(not r.topology_ok for r in results),
        n=len(results),
        hd_missing=sum(math.isnan(r.hd) for r in results),
        min_det=min(dets) if dets else math.nan,
    )


def evaluate(model: N.TedsModel, samples: list[SynthSample], prior=None) -> EvalRow:
    return aggregate(evaluate_samples(model, samples, prior))


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def write_log(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(LOG_COLUMNS)
        for row in history:
            wr.writerow([row["epoch"]] + [_fmt(float(row[c])) for c in LOG_COLUMNS[1:]])


def write_metrics(path: Path, rows: list[tuple[str, EvalRow]], key: str | None = None, extra: list[str] = ()) -> None:
    """One row per experiment; ``key`` names an optional leading column."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(([key] if key else []) + EVAL_COLUMNS + list(extra))
        for name, row in rows:
            if row is None:  # failed variant
                values = ["NA"] * (len(EVAL_COLUMNS) + len(extra))
            else:
                values = row.csv_values() + [_fmt(getattr(row, e)) for e in extra]
            wr.writerow(([name] if key else []) + values)


def write_predictions(out: Path, results: list[SampleResult]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        write_pgm(out / f"pred_{r.index:04d}.pgm", r.pred.astype(np.uint8) * 255)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

ABLATIONS: dict[str, dict] = {
    "A1": dict(smoothing=False, use_grad_loss=False, super_upsample=False),
    "A2": dict(smoothing=False),
    "A3": dict(use_grad_loss=False),
    "A4": dict(super_upsample=False),
    "A5": dict(use_ft=False),
    "A6": dict(use_bulk=False),
    "full": dict(),
}


def _run_variant(cfg: ModelConfig, dataset: Dataset) -> EvalRow:
    model, _ = train(cfg, dataset)
    return evaluate(model, dataset.test)


def run_ablations(cfg: ModelConfig, dataset: Dataset, variants=None) -> list[tuple[str, EvalRow | None]]:
    """Train and evaluate every ablation variant with an identical budget and seed."""
    rows = []
    for name in variants or ABLATIONS:
        vcfg = dataclasses.replace(cfg, **ABLATIONS[name])
        try:
            rows.append((name, _run_variant(vcfg, dataset)))
        except Exception:  # one failing variant must not sink the table
            log.exception("ablation %s failed", name)
            rows.append((name, None))
    return rows


def sweep_integration_layers(cfg: ModelConfig, dataset: Dataset, T_values=range(2, 17)) -> list[tuple[int, EvalRow]]:
    return [(T, _run_variant(dataclasses.replace(cfg, T=T), dataset)) for T in T_values]


def sweep_prior_radius(cfg: ModelConfig, dataset: Dataset, radii) -> list[tuple[int, EvalRow]]:
    return [(r, _run_variant(dataclasses.replace(cfg, prior_radius=r), dataset)) for r in radii]


