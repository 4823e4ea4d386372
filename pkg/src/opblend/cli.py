"""Command-line surface: dataset generation, training, blending, prediction,
evaluation, coefficient sweeps and gradient self-checks.

Every command is deterministic given its inputs and --seed. Exit code 0
means the requested artifacts were fully written and all validations
passed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .blocks import DsanConfig, bind_dsan, dsan_forward, infer_dsan_config
from .data import (
    DatasetError,
    ImageBuffer,
    from_nchw,
    load_manifest,
    make_dataset,
    read_image,
    to_nchw,
    write_image,
)
from .gradcheck import run_suite
from .metrics import LossConfig, psnr, ssim, ssim_db, total_variation
from .sheets import contact_sheet
from .train import (
    STRATEGY_NAMES,
    TrainConfig,
    TrainingDiverged,
    run_strategy,
    strategy_plan,
)
from .weights import (
    ArchiveError,
    BlendSpec,
    CoefficientError,
    IncompatibleModelsError,
    blend,
    compat_check,
    load_archive,
    save_archive,
)

MODE_ALIASES = {
    "i": "interpolate",
    "f": "forward",
    "b": "back",
    "fts": "forward_ts",
    "bts": "back_ts",
}

FORMULAS = {
    "interpolate": "V = g*A + (1-g)*B",
    "forward": "V = (A - (1-a)*B)/a",
    "back": "V = (B - b*A)/(1-b)",
    "forward_ts": "V = ((1+a)*B - (1-a)*A)/(2a)",
    "back_ts": "V = ((1+b)*A - (1-b)*B)/(2b)",
}


class CommandError(RuntimeError):
    """A command failed; the message goes to stderr and the exit code is 1."""


def _canonical_mode(mode: str) -> str:
    m = MODE_ALIASES.get(mode, mode)
    if m not in FORMULAS:
        raise CommandError(f"unknown blend mode {mode!r}")
    return m


def _load_pair(path_a, path_b):
    a, b = load_archive(path_a), load_archive(path_b)
    report = compat_check(a, b)
    if not report.ok:
        raise CommandError(f"models are not blend-compatible:\n{report}")
    return a, b


def _predict_array(params, img: ImageBuffer, slope: float = 0.2) -> np.ndarray:
    """Run the model on one image, padding odd extents to even and cropping back."""
    cfg = infer_dsan_config(params, lrelu_slope=slope)
    if img.channels != cfg.in_channels:
        raise CommandError(
            f"model expects {cfg.in_channels}-channel images, got {img.channels}"
        )
    arr = to_nchw(img)
    _, _, h, w = arr.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        arr = np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    model = bind_dsan(params, cfg)
    out = dsan_forward(model, Tensor(arr)).data
    return out[:, :, :h, :w]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    manifest = make_dataset(
        args.inputs,
        args.out,
        effect_name=args.effect,
        strength=args.strength,
        seed=args.seed,
        val_fraction=args.val_fraction,
    )
    n_val = len(manifest.split_records("val"))
    print(f"wrote {len(manifest.records)} records ({n_val} val) to {manifest.path}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        loss_raw = raw.pop("loss", {})
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(raw) - known
        if unknown:
            raise CommandError(f"unknown config keys: {sorted(unknown)}")
        cfg = replace(cfg, **raw, loss=LossConfig(**loss_raw))
    overrides = {}
    if args.lr is not None:
        overrides["lr0"] = args.lr
    for key in ("epochs", "batch", "patch", "seed", "steps_per_epoch"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.phi is not None:
        overrides["loss"] = replace(cfg.loss, phi=args.phi)
    return replace(cfg, **overrides)


def cmd_train(args) -> int:
    plan = strategy_plan(args.strategy)
    data_a = load_manifest(args.data_a)
    if args.strategy == "single":
        datasets = {"effect": data_a, "identity": data_a.identity_variant()}
    else:
        if not args.data_b:
            raise CommandError(f"strategy {args.strategy!r} needs --data-b")
        datasets = {"a": data_a, "b": load_manifest(args.data_b)}
    cfg = _train_config(args)
    dsan_cfg = DsanConfig(channels=args.channels, in_channels=args.in_channels)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        models, traces = run_strategy(plan, datasets, cfg, dsan_cfg)
    except TrainingDiverged as e:
        raise CommandError(f"training diverged: {e}") from e
    for name, params in models.items():
        save_archive(params, out_dir / f"{name}.cei")
        trace = traces[name]
        (out_dir / f"trace_{name}.txt").write_text(
            "\n".join(stat.line() for stat in trace) + ("\n" if trace else "")
        )
        last = trace[-1].mean_loss if trace else float("nan")
        print(f"{name}: {len(trace)} epochs, final loss {last:.6f} -> {out_dir / (name + '.cei')}")
    return 0


def cmd_blend(args) -> int:
    a, b = _load_pair(args.model_a, args.model_b)
    mode = _canonical_mode(args.mode)
    spec = BlendSpec(mode, args.coeff, args.floor)
    out = blend(a, b, spec)
    save_archive(out, args.out)
    print(f"{mode}: {FORMULAS[mode]} with coeff={args.coeff:g} -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    params = load_archive(args.model)
    img = read_image(args.input)
    out = _predict_array(params, img)
    write_image(from_nchw(out), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    params = load_archive(args.model)
    manifest = load_manifest(args.data)
    records = manifest.split_records(args.split)
    if not records:
        raise CommandError(f"split {args.split!r} of {args.data} is empty")
    print("input\tpsnr_db\tssim\tssim_db")
    psnrs, ssims = [], []
    for r in records:
        img, lab = read_image(r.input_path), read_image(r.label_path)
        # metrics on the 8-bit image domain, matching what predict writes
        pred = to_nchw(from_nchw(_predict_array(params, img)))
        pred = np.round(pred * 255.0) / np.float32(255.0)
        p = psnr(pred, to_nchw(lab))
        s = ssim(pred, to_nchw(lab))
        psnrs.append(p)
        ssims.append(s)
        print(f"{r.input_path}\t{p:.2f}\t{s:.6f}\t{ssim_db(s):.2f}")
    mean_ssim = float(np.mean(ssims))
    print(f"MEAN\t{float(np.mean(psnrs)):.2f}\t{mean_ssim:.6f}\t{ssim_db(mean_ssim):.2f}")
    return 0


def cmd_sweep(args) -> int:
    a, b = _load_pair(args.model_a, args.model_b)
    mode = _canonical_mode(args.mode)
    try:
        coeffs = [float(c) for c in args.coeffs.split(",") if c.strip()]
    except ValueError as e:
        raise CommandError(f"bad --coeffs list {args.coeffs!r}: {e}") from e
    if not coeffs:
        raise CommandError("--coeffs is empty")
    img = read_image(args.input)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = ".pgm" if img.channels == 1 else ".ppm"
    rows = []
    tiles = []
    for c in coeffs:
        spec = BlendSpec(mode, c, args.floor)
        pred = _predict_array(blend(a, b, spec), img)
        pred_img = from_nchw(pred)
        residual = ImageBuffer(np.abs(img.values - pred_img.values))
        write_image(pred_img, out_dir / f"out_{c:g}{suffix}")
        write_image(residual, out_dir / f"residual_{c:g}{suffix}")
        rows.append((c, total_variation(pred_img.values), psnr(pred_img.values, img.values)))
        tiles.append((f"{c:g}", pred_img.values))
    write_image(ImageBuffer(contact_sheet(tiles)), out_dir / f"sheet{suffix}")
    table = ["coeff\ttv\tpsnr_vs_input"]
    table += [f"{c:g}\t{tv:.6f}\t{p:.2f}" for c, tv, p in rows]
    (out_dir / "sweep.tsv").write_text("\n".join(table) + "\n")
    print("\n".join(table))
    print(f"wrote {2 * len(coeffs) + 2} files to {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opblend",
        description="Train image-smoothing operators and blend their weights "
        "into a continuum of new operators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate effect labels and a manifest")
    p.add_argument("--inputs", required=True, help="directory of PGM/PPM images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--effect", default="gaussian", help="label generator name")
    p.add_argument("--strength", type=float, default=1.0, help="effect strength (blur sigma)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run a multi-stage training strategy")
    p.add_argument("--data-a", required=True, help="manifest for effect A (or the single effect)")
    p.add_argument("--data-b", help="manifest for effect B")
    p.add_argument("--strategy", choices=STRATEGY_NAMES, default="a2b2a")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--in-channels", type=int, default=1)
    p.add_argument("--lr", type=float, dest="lr")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--phi", type=float, help="SSIM loss weight")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("blend", help="blend two model archives into a new one")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--mode", required=True, help="i|f|b|fts|bts or full mode names")
    p.add_argument("--coeff", type=float, required=True)
    p.add_argument("--floor", type=float, default=0.05, help="epsilon floor for denominators")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("predict", help="run a model on one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="PSNR/SSIM of a model over a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="blend at several coefficients and predict each")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--mode", required=True)
    p.add_argument("--coeffs", required=True, help="comma-separated coefficients")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--floor", type=float, default=0.05)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        CommandError,
        ArchiveError,
        DatasetError,
        IncompatibleModelsError,
        CoefficientError,
        OSError,
        ValueError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
