"""Full-reference metrics, per-variant evaluation, and ordering reports.

PSNR and SSIM follow the standard definitions (Gaussian window 11,
sigma 1.5 for SSIM, valid-region mean). The two report drivers evaluate
trained variants on a split and check the expected quality orderings,
returning diagnostics instead of crashing when an ordering fails.
"""

from __future__ import annotations

import csv
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .degrade import ImagePair
from .errors import DependencyError, InvalidArgumentError
from .expert import expert_restore, get_expert, restore_for_path
from .flowcore import PathKind
from .rspace import to_chw, to_hwc

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for near-zero MSE."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise InvalidArgumentError(f"max_val must be positive, got {max_val}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * np.log10(max_val**2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_single(a: np.ndarray, b: np.ndarray, max_val: float) -> float:
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    def filt(img):
        full = ndimage.correlate(img, w, mode="constant")
        m = SSIM_WINDOW // 2
        return full[m:-m, m:-m]  # valid region only

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, max_val: float = 1.0) -> float:
    """Mean structural similarity; channels are averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidArgumentError(
            f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    vals = [_ssim_single(a[..., c], b[..., c], max_val) for c in range(a.shape[-1])]
    return float(np.mean(vals))


@dataclass(frozen=True)
class MetricReport:
    method: str
    split: str
    n_steps: int
    image_ids: tuple
    psnr_values: tuple
    ssim_values: tuple
    timestamp: float = field(default_factory=time.time)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))


@dataclass
class Variant:
    """Everything needed to run one trained method on blurred images.

    net=None marks the expert-only pass-through.
    """

    label: str
    net: object = None
    codec: object = None
    path_kind: PathKind = PathKind.DEBLUR_BLUR_TO_CLEAN
    expert: Optional[str] = None
    steps: int = 5


def restore_with_variant(variant: Variant, pair: ImagePair, noise_seed: int = 0):
    y = to_chw(pair.blur)
    if variant.net is None:
        if variant.expert is None:
            raise InvalidArgumentError(f"variant {variant.label!r} has neither net nor expert")
        return expert_restore(get_expert(variant.expert), y)
    return restore_for_path(
        variant.net, variant.codec, variant.path_kind, y,
        steps=variant.steps, expert_id=variant.expert, noise_seed=noise_seed,
    )


def evaluate_variant(variant: Variant, pairs, split: str = "test",
                     n_steps: Optional[int] = None, seed: int = 0) -> MetricReport:
    """Run one variant over a list of pairs and collect per-image metrics."""
    if n_steps is not None:
        variant = Variant(variant.label, variant.net, variant.codec,
                          variant.path_kind, variant.expert, n_steps)
    ids, ps, ss = [], [], []
    for i, pair in enumerate(pairs):
        x_hat = to_hwc(restore_with_variant(variant, pair, noise_seed=seed * 100_003 + i))
        sharp = np.asarray(pair.sharp, dtype=np.float64)
        if sharp.ndim == 3 and sharp.shape[0] in (1, 3) and sharp.shape[-1] not in (1, 3):
            sharp = sharp.transpose(1, 2, 0)
        ids.append(pair.pair_id)
        ps.append(psnr(x_hat, sharp))
        ss.append(ssim(x_hat, sharp))
    return MetricReport(variant.label, split, variant.steps,
                        tuple(ids), tuple(ps), tuple(ss))


TABLE4_LABELS = ("blur-to-clean", "noise-to-residual", "noise-to-clean")
TABLE6_LABELS = ("expert-only", "expert-flow", "expert-flow-residual", "full")


def run_table4(variants: dict, pairs, split: str = "test", seed: int = 0) -> dict:
    """Path comparison: blur-to-clean should beat the residual path, which
    should beat the plain generative path, each by a clear margin."""
    missing = [k for k in TABLE4_LABELS if k not in variants]
    if missing:
        raise DependencyError(f"missing trained path variants: {missing}")
    reports = {k: evaluate_variant(variants[k], pairs, split, seed=seed) for k in TABLE4_LABELS}
    p = {k: reports[k].mean_psnr for k in TABLE4_LABELS}
    diagnostics = []
    if not p["blur-to-clean"] > p["noise-to-residual"]:
        diagnostics.append(
            f"blur-to-clean ({p['blur-to-clean']:.2f} dB) does not beat "
            f"noise-to-residual ({p['noise-to-residual']:.2f} dB)"
        )
    if not p["noise-to-residual"] > p["noise-to-clean"]:
        diagnostics.append(
            f"noise-to-residual ({p['noise-to-residual']:.2f} dB) does not beat "
            f"noise-to-clean ({p['noise-to-clean']:.2f} dB)"
        )
    return {
        "reports": reports,
        "psnr": p,
        "margins": {
            "blur_vs_residual": p["blur-to-clean"] - p["noise-to-residual"],
            "residual_vs_gen": p["noise-to-residual"] - p["noise-to-clean"],
        },
        "ordering_ok": not diagnostics,
        "diagnostics": diagnostics,
    }


def run_table6(variants: dict, pairs, split: str = "test", seed: int = 0) -> dict:
    """Module ablation: the plain generative head collapses fidelity, the
    residual loss recovers most of it, the full method stays near the
    expert."""
    missing = [k for k in TABLE6_LABELS if k not in variants]
    if missing:
        raise DependencyError(f"missing ablation variants: {missing}")
    reports = {k: evaluate_variant(variants[k], pairs, split, seed=seed) for k in TABLE6_LABELS}
    p = {k: reports[k].mean_psnr for k in TABLE6_LABELS}
    diagnostics = []
    if not p["expert-flow"] < p["expert-flow-residual"]:
        diagnostics.append(
            f"expert-flow ({p['expert-flow']:.2f} dB) not below "
            f"expert-flow-residual ({p['expert-flow-residual']:.2f} dB)"
        )
    if not p["expert-flow-residual"] <= p["full"]:
        diagnostics.append(
            f"expert-flow-residual ({p['expert-flow-residual']:.2f} dB) above "
            f"full ({p['full']:.2f} dB)"
        )
    if not p["full"] <= p["expert-only"] + 0.5:
        diagnostics.append(
            f"full ({p['full']:.2f} dB) exceeds expert-only "
            f"({p['expert-only']:.2f} dB) by more than 0.5 dB"
        )
    return {
        "reports": reports,
        "psnr": p,
        "collapse_db": p["expert-only"] - p["expert-flow"],
        "full_gap_db": p["expert-only"] - p["full"],
        "ordering_ok": not diagnostics,
        "diagnostics": diagnostics,
    }


def run_external_scorer(command, restored_dir, reference_dir,
                        timeout: float = 600.0) -> dict:
    """Score a directory of restored images with an out-of-process metric.

    Learned and no-reference metrics need pretrained networks that do not
    ship here, so they plug in as external executables instead (contract
    in docs/metrics-plugin.md): the tool is called with the restored and
    reference directories as its last two arguments and prints CSV rows
    ``id,score`` on stdout, one per image, after an ``id,score`` header.

    Returns {image id: score}. Tool missing, crashing, timing out, or
    printing something unparseable all raise DependencyError.
    """
    argv = [command] if isinstance(command, str) else list(command)
    if not argv:
        raise InvalidArgumentError("empty scorer command")
    for d in (restored_dir, reference_dir):
        if not Path(d).is_dir():
            raise InvalidArgumentError(f"not a directory: {d}")
    argv = argv + [str(restored_dir), str(reference_dir)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except FileNotFoundError:
        raise DependencyError(f"scorer executable not found: {argv[0]}") from None
    except subprocess.TimeoutExpired:
        raise DependencyError(f"scorer timed out after {timeout:.0f}s") from None
    if proc.returncode != 0:
        detail = (proc.stderr or proc.stdout).strip().splitlines()
        raise DependencyError(
            f"scorer exited with {proc.returncode}: {detail[0] if detail else 'no output'}"
        )
    rows = [r for r in csv.reader(proc.stdout.splitlines()) if r]
    if not rows or [c.strip().lower() for c in rows[0]] != ["id", "score"]:
        raise DependencyError("scorer output missing id,score header")
    scores = {}
    for row in rows[1:]:
        try:
            name, value = row[0].strip(), float(row[1])
        except (IndexError, ValueError):
            raise DependencyError(f"unparseable scorer row: {row!r}") from None
        scores[name] = value
    if not scores:
        raise DependencyError("scorer produced a header but no rows")
    return scores


def write_report_csv(path, reports) -> None:
    """Per-image rows plus one aggregate row per report."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "split", "n_steps", "id", "psnr", "ssim"])
        for rep in reports:
            for pid, p, s in zip(rep.image_ids, rep.psnr_values, rep.ssim_values):
                writer.writerow([rep.method, rep.split, rep.n_steps, pid,
                                 f"{p:.6f}", f"{s:.6f}"])
            writer.writerow([rep.method, rep.split, rep.n_steps, "mean",
                             f"{rep.mean_psnr:.6f}", f"{rep.mean_ssim:.6f}"])
