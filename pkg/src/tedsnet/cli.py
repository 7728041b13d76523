"""Command-line entry point: ``tedsnet <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 missing or invalid inputs, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import fields as F
from . import network as N
from . import ndtensor as nt
from . import synthdata as S
from . import trainer as TR

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("tedsnet")


class InputError(Exception):
    """Missing or invalid input; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _run_config(args) -> C.RunConfig:
    path = getattr(args, "config", None)
    if path and not Path(path).is_file():
        raise InputError(f"{path}: config file not found")
    return C.load(path, getattr(args, "override", None))


def _write_resolved(out: Path, cfg: C.RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(C.dump(cfg), encoding="utf-8")


def _model_meta(cfg: C.ModelConfig) -> dict[str, str]:
    meta = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        meta[f"cfg.{f.name}"] = str(v).lower() if isinstance(v, bool) else str(v)
    return meta


def _load_model(ckpt: str, fallback: C.RunConfig) -> N.TedsModel:
    path = Path(ckpt)
    if not path.is_file():
        raise InputError(f"{path}: checkpoint not found")
    try:
        meta, _ = N.read_checkpoint(path)
        pairs = {k[4:]: v for k, v in meta.items() if k.startswith("cfg.")}
        cfg = C.apply(fallback, pairs).model
        return N.load_checkpoint(path, cfg)
    except (ValueError, KeyError) as e:
        raise InputError(f"{path}: {e}") from None


def _load_data(path) -> S.Dataset:
    if path is None:
        raise InputError("--data is required")
    try:
        return S.load_dataset(Path(path))
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"{path}: cannot read dataset ({e})") from None


def _dump_fields(out: Path, fields: dict[str, np.ndarray]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in fields.items():
        nt.save_tensor(out / f"{name}.tnsr", arr)


def _train(cfg: C.RunConfig, ds: S.Dataset, out: Path):
    try:
        model, history = TR.train(cfg.model, ds)
    except TR.DivergenceError as e:
        _dump_fields(out / "divergence", e.fields)
        log.error("%s; fields dumped to %s", e, out / "divergence")
        raise
    N.save_checkpoint(model, out / "best.ckpt", extra=_model_meta(cfg.model))
    TR.write_log(out / "log.csv", history)
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    ds = S.generate_dataset(cfg.data)
    try:
        S.save_dataset(ds, out)
        _write_resolved(out, cfg)
    except OSError as e:
        raise InputError(f"cannot write dataset to {out}: {e}") from None
    log.info("wrote %d samples to %s", len(ds.train) + len(ds.val) + len(ds.test), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    ds = _load_data(args.data)
    out = Path(args.out)
    _write_resolved(out, cfg)
    _train(cfg, ds, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args.ckpt, cfg)
    ds = _load_data(args.data)
    if (ds.cfg.h, ds.cfg.w) != (model.h, model.w):
        raise InputError(f"checkpoint expects {model.h}x{model.w} frames, dataset has {ds.cfg.h}x{ds.cfg.w}")
    if not ds.test:
        raise InputError(f"{args.data}: dataset has no test split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = TR.evaluate_samples(model, ds.test)
    row = TR.aggregate(results)
    TR.write_metrics(out / "metrics.csv", [("", row)])
    TR.write_predictions(out, results)
    log.info("dice %.4f  hd %.3f  incorrect topology %d/%d", row.dice_mean, row.hd_mean, row.incorrect_topology, row.n)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _run_config(args)
    ds = _load_data(args.data)
    out = Path(args.out)
    _write_resolved(out, cfg)
    which = args.which
    if which == "ablations":
        rows = TR.run_ablations(cfg.model, ds)
        TR.write_metrics(out / "ablations.csv", rows, key="variant", extra=["min_det"])
    elif which == "layers":
        rows = TR.sweep_integration_layers(cfg.model, ds, cfg.T_values)
        TR.write_metrics(out / "layers.csv", rows, key="T", extra=["min_det"])
    else:
        for r in cfg.radii:
            try:
                S.make_prior(ds.cfg.h, ds.cfg.w, r, cfg.model.prior_thickness)
            except C.ConfigError as e:
                raise InputError(str(e)) from None
        rows = TR.sweep_prior_radius(cfg.model, ds, cfg.radii)
        TR.write_metrics(out / "radius.csv", rows, key="radius", extra=["min_det"])
    return EXIT_OK


def cmd_inspect_field(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args.ckpt, cfg)
    img_path = Path(args.image)
    if not img_path.is_file():
        raise InputError(f"{img_path}: image not found")
    try:
        img = S.read_pgm(img_path).astype(np.float64) / 255.0
    except ValueError as e:
        raise InputError(str(e)) from None
    if img.shape != (model.h, model.w):
        raise InputError(f"{img_path}: image is {img.shape[0]}x{img.shape[1]}, checkpoint expects {model.h}x{model.w}")
    prior = TR.prior_for(model.cfg, model.h, model.w).astype(np.float64)
    grid = N.warp_grid(model)
    with nt.no_grad():
        out = N.teds_forward(model, img[None, None], prior)
        prior_grid = prior if grid == prior.shape else nt.resize_bilinear(nt.Tensor(prior), *grid).data
    dumps = {"prior_grid": prior_grid, "y_bulk": out.y_bulk.data[0], "y_soft": out.y_soft.data[0]}
    for name, phi in (("bulk", out.phi_bulk), ("ft", out.phi_ft)):
        if phi is None:
            continue
        dumps[f"phi_{name}"] = phi.data[0]
        dumps[f"det_{name}"] = F.jacobian_determinant(phi.data[0])
    dest = Path(args.out)
    _dump_fields(dest, dumps)
    for name, arr in dumps.items():
        if name.startswith("phi_"):
            S.write_pgm(dest / f"{name}_rows.pgm", S.heatmap_u8(arr[0]))
            S.write_pgm(dest / f"{name}_cols.pgm", S.heatmap_u8(arr[1]))
        elif name.startswith("det_"):
            S.write_pgm(dest / f"{name}.pgm", S.heatmap_u8(arr))
        else:
            S.write_pgm(dest / f"{name}.pgm", S.to_u8(arr))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tedsnet", description="Topology-preserving segmentation by warping an annulus prior.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory written by gen-data")

    sp = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.set_defaults(func=cmd_eval)

    for name, default in (("ablate", "ablations"), ("sweep", None)):
        sp = sub.add_parser(name, help="run ablations or parameter sweeps")
        common(sp)
        sp.add_argument("--which", choices=["layers", "radius", "ablations"], default=default, required=default is None)
        sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("inspect-field", help="dump the fields a checkpoint predicts for one image")
    sp.add_argument("--config")
    sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True, help="8-bit PGM input image")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_inspect_field)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, C.ConfigError, FileNotFoundError) as e:
        print(f"tedsnet: {e}", file=sys.stderr)
        return EXIT_INPUT
    except TR.DivergenceError as e:
        print(f"tedsnet: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"tedsnet: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
