"""Command-line front end for dataset building, training, and the studies.

Exit codes: 0 success, 2 usage error, 3 missing prerequisite, 4 numeric
failure. Run directories are created atomically (written to a temp dir,
then renamed) so a crash never leaves a half-written run that looks like
a result. The run root comes from --runs-dir, then DEBLURFLOW_RUNS_DIR,
then ./runs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from .degrade import (
    KERNEL_KINDS,
    KernelSpec,
    build_dataset,
    load_image,
    load_split,
    save_image,
    synthesize_sharp_images,
)
from .errors import (
    DependencyError,
    InvalidArgumentError,
    NotFoundError,
    NumericFailureError,
)
from .evalkit import (
    TABLE4_LABELS,
    TABLE6_LABELS,
    Variant,
    evaluate_variant,
    run_table4,
    run_table6,
    write_report_csv,
)
from .expert import make_restorer_expert, restore_for_path
from .flowcore import PathKind
from .model import build_net
from .rspace import FixedCodec, build_codec, make_vspace_codec, mac_cost, to_chw
from .trainer import (
    codec_config_of,
    config_from_mapping,
    config_hash,
    load_stage0_expert,
    load_stage2_runtime,
    model_config_of,
    train_stage,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidArgumentError(message)


def _runs_root(args) -> Path:
    if getattr(args, "runs_dir", None):
        return Path(args.runs_dir)
    return Path(os.environ.get("DEBLURFLOW_RUNS_DIR", "runs"))


def _effective_config(args) -> TrainConfig:
    """defaults < config file < --set overrides < --seed shortcut."""
    mapping: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise NotFoundError(f"no config file at {path}")
        cp = configparser.ConfigParser()
        cp.read(path)
        if "train" in cp:
            mapping.update(dict(cp["train"]))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise InvalidArgumentError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        mapping["seed"] = str(args.seed)
    return config_from_mapping(mapping)


@contextmanager
def _atomic_dir(final: Path):
    """Yield a staging directory that replaces `final` only on success."""
    final = Path(final)
    if final.exists():
        raise InvalidArgumentError(f"refusing to overwrite existing {final}")
    final.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{final.name}-", dir=final.parent))
    try:
        yield staging
        os.replace(staging, final)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise


def _write_csv_atomic(path: Path, rows, header) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _variant_from_run(run_dir, label: str, steps: int, with_expert=True) -> Variant:
    net, codec, meta = load_stage2_runtime(run_dir)
    kind = PathKind(meta["path_kind"])
    expert = meta.get("expert") if with_expert else None
    if expert == "identity":
        expert = None
    return Variant(label, net=net, codec=codec, path_kind=kind,
                   expert=expert, steps=steps)


# ---------------------------------------------------------------- commands

def cmd_make_data(args) -> int:
    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    bad = [k for k in kinds if k not in KERNEL_KINDS]
    if bad:
        raise InvalidArgumentError(f"unknown kernel kinds {bad}; choose from {KERNEL_KINDS}")
    if args.extent_min > args.extent_max:
        raise InvalidArgumentError("--extent-min must not exceed --extent-max")
    spec = KernelSpec(kinds=kinds, size=args.kernel_size,
                      extent_range=(args.extent_min, args.extent_max))
    out = Path(args.out)
    with _atomic_dir(out) as staging:
        sources = staging / "sources"
        synthesize_sharp_images(sources, args.count, size=args.size, seed=args.seed)
        rows = build_dataset(sources, staging, spec, seed=args.seed)
        cp = configparser.ConfigParser()
        cp["make-data"] = {
            "count": str(args.count), "size": str(args.size), "seed": str(args.seed),
            "kernel_size": str(args.kernel_size), "kinds": ",".join(kinds),
            "extent_min": str(args.extent_min), "extent_max": str(args.extent_max),
        }
        with open(staging / "build.ini", "w") as fh:
            cp.write(fh)
    splits = {s: sum(1 for r in rows if r.split == s) for s in ("train", "val", "test")}
    print(f"dataset: {out} ({splits['train']} train / {splits['val']} val / "
          f"{splits['test']} test)")
    return 0


def cmd_train(args) -> int:
    config = _effective_config(args)
    name = args.name or f"stage{args.stage}-{config_hash(config)}"
    final = _runs_root(args) / name
    with _atomic_dir(final) as staging:
        record = train_stage(args.stage, config, args.data, staging,
                             stage0_run=args.stage0_run, stage1_run=args.stage1_run)
    line = f"run: {final}"
    if not np.isnan(record.final_val_psnr):
        line += f" (val psnr {record.final_val_psnr:.2f} dB)"
    print(line)
    return 0


def cmd_sample(args) -> int:
    if args.steps < 1:
        raise InvalidArgumentError(f"--steps must be >= 1, got {args.steps}")
    net, codec, meta = load_stage2_runtime(args.run)
    image = load_image(args.input)
    if image.ndim == 2:
        image = image[..., None]
    side = net.config.grid * codec.factor
    if image.shape[0] != side or image.shape[1] != side:
        raise InvalidArgumentError(
            f"input is {image.shape[1]}x{image.shape[0]}, this run samples "
            f"{side}x{side} images"
        )
    y = to_chw(image)
    expert = meta.get("expert")
    x_hat = restore_for_path(
        net, codec, PathKind(meta["path_kind"]), y, args.steps,
        expert_id=None if expert == "identity" else expert, noise_seed=args.seed,
    )
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, x_hat.numpy().transpose(1, 2, 0))
    print(f"restored: {out} (steps {args.steps})")
    return 0


def cmd_eval(args) -> int:
    variant = _variant_from_run(args.run, "eval", args.steps)
    pairs = load_split(args.data, args.split)
    if not pairs:
        raise DependencyError(f"no {args.split!r} pairs under {args.data}")
    report = evaluate_variant(variant, pairs, split=args.split, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.run) / f"eval-{args.split}-n{args.steps}.csv"
    _report_to_csv(out, [report])
    print(f"{args.split}: psnr {report.mean_psnr:.2f} dB, ssim {report.mean_ssim:.4f} "
          f"({len(pairs)} images)")
    print(f"report: {out}")
    return 0


def _report_to_csv(path, reports) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    os.close(fd)
    try:
        write_report_csv(tmp, reports)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_ablate_paths(args) -> int:
    runs = {
        "blur-to-clean": args.deblur_run,
        "noise-to-residual": args.residual_run,
        "noise-to-clean": args.gen_run,
    }
    variants = {label: _variant_from_run(run, label, args.steps)
                for label, run in runs.items()}
    pairs = load_split(args.data, args.split)
    result = run_table4(variants, pairs, split=args.split, seed=args.seed)
    out = Path(args.out)
    _report_to_csv(out, [result["reports"][label] for label in TABLE4_LABELS])
    for label in TABLE4_LABELS:
        print(f"{label}: {result['psnr'][label]:.2f} dB")
    m = result["margins"]
    print(f"margins: blur-vs-residual {m['blur_vs_residual']:+.2f} dB, "
          f"residual-vs-gen {m['residual_vs_gen']:+.2f} dB")
    for line in result["diagnostics"]:
        print(f"note: {line}")
    print(f"report: {out}")
    return 0


def cmd_ablate_modules(args) -> int:
    expert_module = load_stage0_expert(args.stage0_run)
    make_restorer_expert(expert_module, "toy-restorer")
    variants = {
        "expert-only": Variant("expert-only", expert="toy-restorer"),
        "expert-flow": _variant_from_run(args.gen_run, "expert-flow", args.steps),
        "expert-flow-residual": _variant_from_run(
            args.residual_run, "expert-flow-residual", args.steps),
        "full": _variant_from_run(args.full_run, "full", args.steps),
    }
    pairs = load_split(args.data, args.split)
    result = run_table6(variants, pairs, split=args.split, seed=args.seed)
    out = Path(args.out)
    _report_to_csv(out, [result["reports"][label] for label in TABLE6_LABELS])
    for label in TABLE6_LABELS:
        print(f"{label}: {result['psnr'][label]:.2f} dB")
    print(f"fidelity collapse: {result['collapse_db']:.2f} dB; "
          f"full-vs-expert gap: {result['full_gap_db']:+.2f} dB")
    for line in result["diagnostics"]:
        print(f"note: {line}")
    print(f"report: {out}")
    return 0


def cmd_ablate_steps(args) -> int:
    steps_list = []
    for tok in args.steps.split(","):
        tok = tok.strip()
        if tok:
            n = int(tok)
            if n < 1:
                raise InvalidArgumentError(f"step counts must be >= 1, got {n}")
            steps_list.append(n)
    if not steps_list:
        raise InvalidArgumentError("--steps needs at least one step count")
    pairs = load_split(args.data, args.split)
    rows = []
    for n in steps_list:
        variant = _variant_from_run(args.run, f"n{n}", n)
        report = evaluate_variant(variant, pairs, split=args.split, seed=args.seed)
        rows.append([n, f"{report.mean_psnr:.4f}", f"{report.mean_ssim:.6f}"])
        print(f"steps {n}: psnr {report.mean_psnr:.2f} dB, ssim {report.mean_ssim:.4f}")
    out = Path(args.out)
    _write_csv_atomic(out, rows, ["steps", "psnr", "ssim"])
    print(f"report: {out}")
    return 0


def cmd_ablate_cotrain(args) -> int:
    ratios = []
    for tok in args.ratios.split(","):
        tok = tok.strip()
        if tok:
            rho = float(tok)
            if not 0.0 <= rho <= 1.0:
                raise InvalidArgumentError(f"ratios must lie in [0,1], got {rho}")
            ratios.append(rho)
    if not ratios:
        raise InvalidArgumentError("--ratios needs at least one value")
    base = _effective_config(args)
    pairs = load_split(args.data, args.split)
    rows, scores = [], []
    for rho in ratios:
        config = replace(base, rho=rho)
        name = f"cotrain-rho{rho:g}-{config_hash(config)}"
        final = _runs_root(args) / name
        cached = final.exists()
        if not cached:
            with _atomic_dir(final) as staging:
                train_stage(2, config, args.data, staging,
                            stage0_run=args.stage0_run, stage1_run=args.stage1_run)
        variant = _variant_from_run(final, f"rho{rho:g}", args.steps)
        report = evaluate_variant(variant, pairs, split=args.split, seed=args.seed)
        scores.append(report.mean_psnr)
        rows.append([f"{rho:g}", f"{report.mean_psnr:.4f}", f"{report.mean_ssim:.6f}",
                     str(final)])
        note = " [cached]" if cached else ""
        print(f"rho {rho:g}: psnr {report.mean_psnr:.2f} dB ({final}){note}")
    out = Path(args.out)
    _write_csv_atomic(out, rows, ["rho", "psnr", "ssim", "run"])
    print(f"report: {out}")
    violations = [
        f"psnr rose from {a:.2f} to {b:.2f} between rho {ra:g} and {rb:g}"
        for (ra, a), (rb, b) in zip(zip(ratios, scores), zip(ratios[1:], scores[1:]))
        if b > a
    ]
    for line in violations:
        print(f"trend violated: {line}", file=sys.stderr)
    return 1 if violations else 0


def cmd_macs(args) -> int:
    config = _effective_config(args)
    size = args.size
    rcodec = build_codec(codec_config_of(config))
    vcodec = make_vspace_codec()
    net = build_net(model_config_of(config))
    shape = (config.latent_channels, config.grid, config.grid)
    r_macs = mac_cost(rcodec, (3, size, size))
    v_macs = mac_cost(vcodec, (3, size, size))
    n_macs = mac_cost(net, shape)
    print(f"input {size}x{size}")
    print(f"codec (restoration latent): {r_macs:,} MACs")
    print(f"codec (generation-scale baseline): {v_macs:,} MACs")
    print(f"field network: {n_macs:,} MACs per evaluation")
    print(f"codec ratio: {v_macs / r_macs:.1f}x")
    fixed = FixedCodec(stages=config.codec_stages)
    print(f"fixed pixel-shuffle codec: {mac_cost(fixed, (3, size, size))} MACs")
    return 0


# ----------------------------------------------------------------- parser

def _add_common_eval_args(p, default_out):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=default_out, help="report CSV path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deblurflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("make-data", help="synthesize a paired blur dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kernel-size", type=int, default=11)
    p.add_argument("--extent-min", type=int, default=5)
    p.add_argument("--extent-max", type=int, default=9)
    p.add_argument("--kinds", default=",".join(KERNEL_KINDS))
    p.set_defaults(handler=cmd_make_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, required=True, choices=(0, 1, 2))
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="INI file with a [train] section")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--name", help="run directory name")
    p.add_argument("--runs-dir")
    p.add_argument("--stage0-run")
    p.add_argument("--stage1-run")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sample", help="deblur one image with a stage-2 run")
    p.add_argument("--run", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("eval", help="score a stage-2 run on a split")
    p.add_argument("--run", required=True)
    _add_common_eval_args(p, default_out=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate-paths", help="compare the three training paths")
    p.add_argument("--deblur-run", required=True)
    p.add_argument("--residual-run", required=True)
    p.add_argument("--gen-run", required=True)
    _add_common_eval_args(p, default_out="paths-ablation.csv")
    p.set_defaults(handler=cmd_ablate_paths)

    p = sub.add_parser("ablate-modules", help="expert/flow component ablation")
    p.add_argument("--stage0-run", required=True)
    p.add_argument("--gen-run", required=True)
    p.add_argument("--residual-run", required=True)
    p.add_argument("--full-run", required=True)
    _add_common_eval_args(p, default_out="modules-ablation.csv")
    p.set_defaults(handler=cmd_ablate_modules)

    p = sub.add_parser("ablate-steps", help="PSNR across sampling step counts")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--steps", default="1,3,5,10,20", help="comma-separated counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="steps-ablation.csv")
    p.set_defaults(handler=cmd_ablate_steps)

    p = sub.add_parser("ablate-cotrain", help="train and score one run per mixing ratio")
    p.add_argument("--ratios", default="0,0.3,0.5,0.7,1.0")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--stage0-run")
    p.add_argument("--stage1-run", required=True)
    p.add_argument("--runs-dir")
    _add_common_eval_args(p, default_out="cotrain-ablation.csv")
    p.set_defaults(handler=cmd_ablate_cotrain)

    p = sub.add_parser("macs", help="multiply-accumulate cost breakdown")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_macs)

    return parser


def dispatch(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help and argparse's own exits
        return int(exc.code or 0)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return int(args.handler(args) or 0)
    except (InvalidArgumentError, NotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
