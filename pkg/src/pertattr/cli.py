"""Command-line front door: attribution runs, evaluation, sweeps, fixtures.

Every run writes a resolved-config JSON next to its outputs so results can
be replayed exactly; reruns with the same config and seed are byte-identical
regardless of ``--threads``.

Exit codes: 2 bad arguments, 3 I/O trouble, 4 method failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import (
    CapabilityError,
    ExternalToolError,
    FormatError,
    MethodError,
    ParameterError,
    ShapeError,
)
from .fillers import make_filler
from .fixtures import make_shapes_dataset
from .imgcore import AttributionMap, read_heatmap, read_image, write_heatmap
from .lime import LimeConfig, lime_attribute
from .metrics import (
    DEFAULT_ALPHA_GRID,
    compare_fillers,
    deletion_metric,
    load_eval_dataset,
    localization_error,
    read_object_mask,
    saliency_metric,
    select_alpha,
)
from .mp import FidoConfig, Mp2Config, MpConfig, fido_ca_attribute, mp2_attribute, mp_attribute
from .oracle import FiniteDiffGradients
from .sensitivity import SWEEP_AXES, SweepSpec, run_sweep
from .sp import SpConfig, sp_attribute
from .tinycnn import load_model, save_model, train_tiny_cnn
from .util import parallel_map

EXIT_BAD_ARGS = 2
EXIT_IO = 3
EXIT_METHOD = 4

_METHODS = ("sp", "lime", "mp", "mp2", "fido")


def _write_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _float_list(text: str) -> tuple:
    return tuple(float(v) if "." in v else int(v) for v in text.split(","))


def _merge_config(args: argparse.Namespace, parser_defaults: dict) -> dict:
    """Resolve option values: explicit flag > config file > built-in default."""
    resolved = dict(parser_defaults)
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config file {args.config} is not valid JSON: {exc}") from exc
        unknown = set(file_cfg) - set(parser_defaults)
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_cfg)
    for key in parser_defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


# ---------------------------------------------------------------------------
# attribute
# ---------------------------------------------------------------------------

_ATTRIBUTE_DEFAULTS = {
    "method": "sp",
    "filler": None,  # method default: gray for sp/lime, blur for mp/mp2, inpaint for fido
    "target_class": 0,
    "seed": 0,
    "threads": 1,
    "patch": 29,
    "stride": 3,
    "segments": 50,
    "samples": 1000,
    "kernel_width": 0.25,
    "lasso_lambda": 0.01,
    "fit_steps": 1000,
    "occlusion_prob": 0.5,
    "mask_size": None,  # 28 for mp/mp2, 56 for fido
    "lambda1": 0.01,
    "lambda2": 0.2,
    "tv_beta": 3.0,
    "steps": 300,
    "lr": None,  # 0.1 for mp, 0.05 for fido
    "jitter_batch": 4,
    "blur_sigma": 10.0,
    "stop_prob": 0.001,
    "pixels_per_step": 2,
    "max_steps": None,
    "reg": 0.001,
    "objective": "preservation",
    "fd_gradients": False,
}

_DEFAULT_FILLER = {"sp": "gray", "lime": "gray", "mp": "blur", "mp2": "blur", "fido": "inpaint"}


def _build_attribution(cfg: dict, oracle, image):
    method = cfg["method"]
    filler_spec = cfg["filler"] or _DEFAULT_FILLER[method]
    filler = make_filler(filler_spec, noise_seed=cfg["seed"], blur_sigma=cfg["blur_sigma"])
    if cfg["fd_gradients"] and not oracle.has_gradients:
        oracle = FiniteDiffGradients(oracle)
    target = cfg["target_class"]
    if method == "sp":
        sp_cfg = SpConfig(
            patch=cfg["patch"],
            stride=cfg["stride"],
            filler=filler,
            target_class=target,
            threads=cfg["threads"],
        )
        return sp_attribute(image, oracle, sp_cfg), sp_cfg.describe()
    if method == "lime":
        lime_cfg = LimeConfig(
            n_segments=cfg["segments"],
            n_samples=cfg["samples"],
            kernel_width=cfg["kernel_width"],
            lasso_lambda=cfg["lasso_lambda"],
            fit_steps=cfg["fit_steps"],
            occlusion_prob=cfg["occlusion_prob"],
            seed=cfg["seed"],
            filler=filler,
            target_class=target,
            threads=cfg["threads"],
        )
        return lime_attribute(image, oracle, lime_cfg).map, lime_cfg.describe()
    if method == "mp":
        mp_cfg = MpConfig(
            mask_size=cfg["mask_size"] or 28,
            lambda1=cfg["lambda1"],
            lambda2=cfg["lambda2"],
            tv_beta=cfg["tv_beta"],
            steps=cfg["steps"],
            lr=cfg["lr"] if cfg["lr"] is not None else 0.1,
            jitter_batch=cfg["jitter_batch"],
            blur_sigma=cfg["blur_sigma"],
            target_class=target,
            seed=cfg["seed"],
        )
        return mp_attribute(image, oracle, mp_cfg), mp_cfg.describe()
    if method == "mp2":
        mp2_cfg = Mp2Config(
            mask_size=cfg["mask_size"] or 28,
            pixels_per_step=cfg["pixels_per_step"],
            stop_prob=cfg["stop_prob"],
            max_steps=cfg["max_steps"],
            blur_sigma=cfg["blur_sigma"],
            filler=filler,
            target_class=target,
        )
        return mp2_attribute(image, oracle, mp2_cfg), mp2_cfg.describe()
    fido_cfg = FidoConfig(
        mask_size=cfg["mask_size"] or 56,
        lr=cfg["lr"] if cfg["lr"] is not None else 0.05,
        reg=cfg["reg"],
        steps=cfg["steps"],
        filler=filler,
        target_class=target,
        seed=cfg["seed"],
        objective=cfg["objective"],
    )
    return fido_ca_attribute(image, oracle, fido_cfg), fido_cfg.describe()


def cmd_attribute(args) -> int:
    cfg = _merge_config(args, _ATTRIBUTE_DEFAULTS)
    if cfg["method"] not in _METHODS:
        raise ParameterError(f"unknown method {cfg['method']!r}")
    image = read_image(args.image)
    oracle = load_model(args.model)
    out_dir = Path(args.out)
    result, described = _build_attribution(cfg, oracle, image)
    amap = result if isinstance(result, AttributionMap) else result.map

    stem = Path(args.image).stem
    out_dir.mkdir(parents=True, exist_ok=True)
    write_heatmap(amap, out_dir / f"{stem}.heat.png", out_dir / f"{stem}.hmap")
    resolved = {**cfg, "image": str(args.image), "model": str(args.model), "out": str(out_dir)}
    resolved["method_config"] = described
    _write_config(out_dir, resolved)

    history = getattr(result, "history", None)
    if args.trace_csv and history:
        keys = sorted({k for row in history for k in row})
        _write_csv(
            out_dir / f"{stem}.trace.csv",
            keys,
            [[row.get(k, "") for k in keys] for row in history],
        )
    print(f"wrote {out_dir / (stem + '.hmap')}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _load_maps(maps_dir: Path, items):
    loaded = []
    for item, image in items:
        stem = Path(item.name).stem
        path = maps_dir / f"{stem}.hmap"
        if not path.exists():
            raise FileNotFoundError(f"missing heatmap {path}")
        loaded.append((item, image, read_heatmap(path).astype(np.float64)))
    return loaded


def cmd_evaluate(args) -> int:
    items = load_eval_dataset(args.dataset, args.annotations)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        "command": f"evaluate {args.task}",
        "dataset": str(args.dataset),
        "annotations": str(args.annotations),
        "out": str(out_dir),
        "threads": args.threads,
    }

    if args.task == "localization":
        triples = _load_maps(Path(args.maps), items)
        entries = [(amap, list(item.boxes)) for item, _, amap in triples]
        rows = []
        if args.select_alpha:
            for alpha in DEFAULT_ALPHA_GRID:
                rows.append([alpha, localization_error(entries, alpha)])
            best = select_alpha(entries)
            err = localization_error(entries, best)
        else:
            best = args.alpha
            err = localization_error(entries, best)
            rows.append([best, err])
        resolved.update({"maps": str(args.maps), "alpha": best, "error": err})
        _write_csv(out_dir / "localization.csv", ["alpha", "error"], rows)
        print(f"localization error {err:.4f} at alpha {best}")
    elif args.task == "deletion":
        oracle = load_model(args.model)
        triples = _load_maps(Path(args.maps), items)
        step = args.step_pixels

        def one(triple):
            item, image, amap = triple
            return deletion_metric(image, amap, oracle, item.class_id, step).auc

        aucs = parallel_map(one, triples, args.threads)
        rows = [[t[0].name, f"{auc:.6f}"] for t, auc in zip(triples, aucs)]
        rows.append(["mean", f"{float(np.mean(aucs)):.6f}"])
        resolved.update({"maps": str(args.maps), "model": str(args.model), "step_pixels": step})
        _write_csv(out_dir / "deletion.csv", ["image", "auc"], rows)
        print(f"mean deletion auc {float(np.mean(aucs)):.4f}")
    elif args.task == "saliency":
        oracle = load_model(args.model)
        triples = _load_maps(Path(args.maps), items)
        if args.select_alpha:
            entries = [(amap, list(item.boxes)) for item, _, amap in triples]
            alpha = select_alpha(entries)
        else:
            alpha = args.alpha

        def one(triple):
            item, image, amap = triple
            return saliency_metric(image, amap, oracle, item.class_id, alpha)

        vals = parallel_map(one, triples, args.threads)
        rows = [[t[0].name, f"{v:.6f}"] for t, v in zip(triples, vals)]
        rows.append(["mean", f"{float(np.mean(vals)):.6f}"])
        resolved.update({"maps": str(args.maps), "model": str(args.model), "alpha": alpha})
        _write_csv(out_dir / "saliency.csv", ["image", "saliency"], rows)
        print(f"mean saliency {float(np.mean(vals)):.4f} at alpha {alpha}")
    else:  # compare-fillers
        oracle = load_model(args.model)
        dataset_dir = Path(args.dataset)
        triples = []
        for item, image in items:
            mask = read_object_mask(dataset_dir / f"{item.name}.mask.png")
            triples.append((image, mask, item.class_id))
        fillers = {
            name: make_filler(name, noise_seed=args.seed, blur_sigma=args.blur_sigma)
            for name in args.fillers.split(",")
        }
        table = compare_fillers(triples, oracle, fillers)
        rows = [[r["name"], f"{r['accuracy']:.4f}", f"{r['ms_ssim']:.4f}"] for r in table]
        resolved.update({"model": str(args.model), "fillers": args.fillers})
        _write_csv(out_dir / "compare_fillers.csv", ["filler", "accuracy", "ms_ssim"], rows)
        for r in table:
            print(f"{r['name']:12s} accuracy {r['accuracy']:.3f}  ms-ssim {r['ms_ssim']:.3f}")

    _write_config(out_dir, resolved)
    return 0


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------


def cmd_sensitivity(args) -> int:
    items_raw = load_eval_dataset(args.dataset, args.annotations)
    if args.limit:
        items_raw = items_raw[: args.limit]
    oracle = load_model(args.model)
    filler = make_filler(args.filler, noise_seed=args.seed, blur_sigma=args.blur_sigma)
    values = _float_list(args.values) if args.values else ()
    base = json.loads(args.base) if args.base else {}
    spec = SweepSpec(method=args.method, axis=args.axis, values=values, base=base)
    items = [(image, item.class_id) for item, image in items_raw]
    result = run_sweep(items, spec, oracle, filler, threads=args.threads)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    comment = (
        f"axis={result['axis']} values={','.join(str(v) for v in result['values'])} "
        f"k={len(result['values'])} pairs={result['pairs']} n_images={result['n_images']}"
    )
    _write_csv(
        out_dir / "sensitivity.csv",
        ["method", "metric", "mean", "std"],
        [[r["method"], r["metric"], f"{r['mean']:.6f}", f"{r['std']:.6f}"] for r in result["rows"]],
        comment=comment,
    )
    _write_config(
        out_dir,
        {
            "command": "sensitivity",
            "method": args.method,
            "axis": args.axis,
            "values": list(result["values"]),
            "filler": args.filler,
            "dataset": str(args.dataset),
            "model": str(args.model),
            "n_images": result["n_images"],
            "pairs": result["pairs"],
            "seed": args.seed,
            "threads": args.threads,
        },
    )
    for r in result["rows"]:
        print(f"{r['method']:8s} {r['metric']:12s} {r['mean']:.4f} +/- {r['std']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def cmd_fixtures(args) -> int:
    out_dir = Path(args.out)
    info = make_shapes_dataset(
        out_dir, n_train=args.train, n_eval=args.eval_count, size=args.size, seed=args.seed
    )
    print(f"wrote dataset under {out_dir}")
    model_path = out_dir / "model.tcnn"
    if not args.skip_training:
        model, history = train_tiny_cnn(info["train_dir"], seed=args.seed)
        save_model(model, model_path)
        print(f"trained model -> {model_path} (final loss {history[-1]:.4f})")
    _write_config(
        out_dir,
        {
            "command": "fixtures",
            "out": str(out_dir),
            "seed": args.seed,
            "train": args.train,
            "eval": args.eval_count,
            "size": args.size,
            "model": str(model_path) if not args.skip_training else None,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pertattr",
        description="Perturbation-based attribution maps and their evaluation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_attr = sub.add_parser("attribute", help="run one attribution method on one image")
    p_attr.add_argument("--method", choices=_METHODS)
    p_attr.add_argument("--filler", help="gray | noise | blur | inpaint | inpaint-ext:<cmd>")
    p_attr.add_argument("--model", required=True)
    p_attr.add_argument("--image", required=True)
    p_attr.add_argument("--class", dest="target_class", type=int)
    p_attr.add_argument("--seed", type=int)
    p_attr.add_argument("--out", required=True)
    p_attr.add_argument("--config", help="JSON config file; flags override its keys")
    p_attr.add_argument("--threads", type=int)
    p_attr.add_argument("--trace-csv", action="store_true", help="dump per-step traces")
    p_attr.add_argument("--fd-gradients", action="store_true", default=None)
    p_attr.add_argument("--patch", type=int)
    p_attr.add_argument("--stride", type=int)
    p_attr.add_argument("--segments", type=int)
    p_attr.add_argument("--samples", type=int)
    p_attr.add_argument("--kernel-width", type=float)
    p_attr.add_argument("--lasso-lambda", type=float)
    p_attr.add_argument("--fit-steps", type=int)
    p_attr.add_argument("--occlusion-prob", type=float)
    p_attr.add_argument("--mask-size", type=int)
    p_attr.add_argument("--lambda1", type=float)
    p_attr.add_argument("--lambda2", type=float)
    p_attr.add_argument("--tv-beta", type=float)
    p_attr.add_argument("--steps", type=int)
    p_attr.add_argument("--lr", type=float)
    p_attr.add_argument("--jitter-batch", type=int)
    p_attr.add_argument("--blur-sigma", type=float)
    p_attr.add_argument("--stop-prob", type=float)
    p_attr.add_argument("--pixels-per-step", type=int)
    p_attr.add_argument("--max-steps", type=int)
    p_attr.add_argument("--reg", type=float)
    p_attr.add_argument("--objective", choices=("preservation", "deletion"))
    p_attr.set_defaults(func=cmd_attribute)

    p_eval = sub.add_parser("evaluate", help="score heatmaps or fillers against a dataset")
    p_eval.add_argument("task", choices=("localization", "deletion", "saliency", "compare-fillers"))
    p_eval.add_argument("--dataset", required=True, help="directory of PNGs")
    p_eval.add_argument("--annotations", required=True)
    p_eval.add_argument("--maps", help="directory of .hmap files named <image stem>.hmap")
    p_eval.add_argument("--model")
    p_eval.add_argument("--alpha", type=float, default=0.5)
    p_eval.add_argument("--select-alpha", action="store_true")
    p_eval.add_argument("--step-pixels", type=int, default=224 * 8)
    p_eval.add_argument("--fillers", default="gray,noise,blur,inpaint")
    p_eval.add_argument("--blur-sigma", type=float, default=10.0)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--threads", type=int, default=1)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_evaluate)

    p_sens = sub.add_parser("sensitivity", help="hyperparameter sweep with pairwise similarity")
    p_sens.add_argument("--method", required=True, choices=("sp", "lime", "mp2"))
    p_sens.add_argument("--axis", required=True, choices=tuple(SWEEP_AXES))
    p_sens.add_argument("--values", help="comma-separated axis override, e.g. 4,6,8")
    p_sens.add_argument("--base", help="JSON dict of extra method config values")
    p_sens.add_argument("--dataset", required=True)
    p_sens.add_argument("--annotations", required=True)
    p_sens.add_argument("--model", required=True)
    p_sens.add_argument("--filler", default="gray")
    p_sens.add_argument("--blur-sigma", type=float, default=10.0)
    p_sens.add_argument("--limit", type=int, help="use only the first N images")
    p_sens.add_argument("--seed", type=int, default=0)
    p_sens.add_argument("--threads", type=int, default=1)
    p_sens.add_argument("--out", required=True)
    p_sens.set_defaults(func=cmd_sensitivity)

    p_fix = sub.add_parser("fixtures", help="emit the synthetic dataset and train its model")
    p_fix.add_argument("--out", required=True)
    p_fix.add_argument("--seed", type=int, default=0)
    p_fix.add_argument("--train", type=int, default=200)
    p_fix.add_argument("--eval", dest="eval_count", type=int, default=200)
    p_fix.add_argument("--size", type=int, default=32)
    p_fix.add_argument("--skip-training", action="store_true")
    p_fix.set_defaults(func=cmd_fixtures)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    except (FileNotFoundError, OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MethodError, CapabilityError, ExternalToolError) as exc:
        print(f"method error: {exc}", file=sys.stderr)
        return EXIT_METHOD


if __name__ == "__main__":
    sys.exit(main())
