"""Three-stage training pipeline with a functional AdamW and run records.

Stage 0 fits the toy fidelity expert on blur/sharp pairs. Stage 1 fits
the base vector-field network on the noise-to-clean path over sharp
images, through the fixed codec. Stage 2 freezes that base, attaches
adapters, and trains them jointly with the learned codec on the
configured path, mixing raw and expert-restored starts per example.

A run directory holds the effective config, record.csv with one row per
epoch, and the final checkpoint.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .degrade import ImagePair, load_split
from .errors import (
    DependencyError,
    InvalidArgumentError,
    NotFoundError,
    NumericFailureError,
)
from .evalkit import psnr
from .expert import (
    CoTrainConfig,
    ToyRestorer,
    draw_training_pair,
    get_expert,
    make_restorer_expert,
    restore_for_path,
)
from .flowcore import PathKind, draw_time, sample_path
from .model import (
    LoraConfig,
    ModelConfig,
    VectorFieldNet,
    add_adapters,
    build_net,
    load_checkpoint,
    save_checkpoint,
    trainable_params,
)
from .rspace import CodecConfig, FixedCodec, build_codec, pair_to_tensors

STAGES = (0, 1, 2)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9
    weight_decay: float = 1e-3
    eps: float = 1e-8
    grad_clip: float = 1.0
    schedule: str = "cosine"
    lr_floor_frac: float = 0.01
    epochs: int = 40
    batch: int = 8
    crop: int = 64
    seed: int = 0
    path_kind: str = "deblur"
    rho: float = 0.7
    expert: str = "toy-restorer"
    codec: str = "learned"
    time_schedule: str = "uniform01"
    lora_rank: int = 4
    lora_alpha: float = 8.0
    val_every: int = 5
    val_steps: int = 5
    latent_channels: int = 192
    grid: int = 8
    channels: int = 96
    depth: int = 3
    heads: int = 4
    time_embed_dim: int = 64
    codec_stages: int = 3
    codec_base_channels: int = 16
    expert_width: int = 32
    expert_depth: int = 3

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidArgumentError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidArgumentError(f"rho must lie in [0,1], got {self.rho}")
        if self.crop < 1 or self.batch < 1 or self.epochs < 1:
            raise InvalidArgumentError("crop, batch, and epochs must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidArgumentError("betas must lie in [0,1)")
        try:
            PathKind(self.path_kind)
        except ValueError:
            raise InvalidArgumentError(f"unknown path kind {self.path_kind!r}") from None
        if self.codec not in ("learned", "fixed"):
            raise InvalidArgumentError(f"codec must be learned or fixed, got {self.codec!r}")
        if self.schedule != "cosine":
            raise InvalidArgumentError(f"unknown lr schedule {self.schedule!r}")


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def save_config(path, config: TrainConfig) -> None:
    cp = configparser.ConfigParser()
    cp["train"] = {k: repr(v) for k, v in asdict(config).items()}
    with open(path, "w") as fh:
        cp.write(fh)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no config file at {path}")
    cp = configparser.ConfigParser()
    cp.read(path)
    if "train" not in cp:
        raise InvalidArgumentError(f"config {path} has no [train] section")
    return config_from_mapping(dict(cp["train"]))


def config_from_mapping(mapping: dict) -> TrainConfig:
    """Build a TrainConfig from string key/value pairs, typed per field."""
    kwargs = {}
    fields = {f.name: f.type for f in TrainConfig.__dataclass_fields__.values()}
    defaults = TrainConfig()
    for key, raw in mapping.items():
        if key not in fields:
            raise InvalidArgumentError(f"unknown config key {key!r}")
        current = getattr(defaults, key)
        if isinstance(current, bool):
            kwargs[key] = raw.strip().lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            kwargs[key] = int(float(raw))
        elif isinstance(current, float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw.strip().strip("'\"")
    return TrainConfig(**kwargs)


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_psnr: float  # nan when not evaluated this epoch
    lr: float
    seconds: float


@dataclass
class RunRecord:
    stage: int
    config_hash: str
    rows: list = field(default_factory=list)
    checkpoint_dir: str = ""
    final_val_psnr: float = float("nan")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_psnr", "lr", "seconds"])
            for r in self.rows:
                writer.writerow([
                    r.epoch, f"{r.train_loss:.8f}", f"{r.val_loss:.8f}",
                    "" if math.isnan(r.val_psnr) else f"{r.val_psnr:.4f}",
                    f"{r.lr:.3e}", f"{r.seconds:.2f}",
                ])


def read_record_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(EpochRow(
                int(rec["epoch"]), float(rec["train_loss"]), float(rec["val_loss"]),
                float(rec["val_psnr"]) if rec["val_psnr"] else float("nan"),
                float(rec["lr"]), float(rec["seconds"]),
            ))
    return rows


def cosine_lr(step: int, total_steps: int, lr0: float, floor_frac: float = 0.01) -> float:
    """Cosine decay from lr0 to floor_frac * lr0 over total_steps."""
    floor = floor_frac * lr0
    if total_steps <= 1:
        return floor
    frac = min(step / (total_steps - 1), 1.0)
    return floor + (lr0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9
    weight_decay: float = 1e-3
    eps: float = 1e-8


def init_optimizer_state(params) -> dict:
    return {
        "step": 0,
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


def optimizer_step(params, grads, state, config: OptimConfig, lr=None):
    """One decoupled-weight-decay adaptive-moment update, in place.

    Bias-corrected first/second moments; weight decay applies directly
    to the parameter, not through the gradient. `lr` overrides the
    config value so schedules can drive it per step.
    """
    if len(params) != len(grads):
        raise InvalidArgumentError(
            f"got {len(params)} params but {len(grads)} grads"
        )
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InvalidArgumentError(
                f"param shape {tuple(p.shape)} does not match grad {tuple(g.shape)}"
            )
    lr = config.lr if lr is None else lr
    state["step"] += 1
    t = state["step"]
    b1, b2 = config.beta1, config.beta2
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            # decay first so both terms see the pre-update parameter:
            # p <- p - lr*update - lr*wd*p
            p.mul_(1 - lr * config.weight_decay)
            p.add_(m_hat / (v_hat.sqrt() + config.eps), alpha=-lr)
    return params, state


def clip_gradients(grads, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm."""
    total = math.sqrt(sum(float((g**2).sum()) for g in grads))
    if total > max_norm and total > 0:
        scale = max_norm / total
        with torch.no_grad():
            for g in grads:
                g.mul_(scale)
    return total


def freeze_mask(stage: int, net=None, codec=None, expert=None) -> set:
    """Names of the parameters a stage is allowed to update."""
    if stage not in STAGES:
        raise InvalidArgumentError(f"unknown stage {stage}")
    names = set()
    if stage == 0 and expert is not None:
        names |= {f"expert.{n}" for n, _ in expert.named_parameters()}
    elif stage == 1 and net is not None:
        names |= {f"net.{n}" for n, _ in net.named_parameters()}
    elif stage == 2:
        if net is not None:
            names |= {f"net.{n}" for n, _ in net.named_parameters() if "lora_" in n}
        if codec is not None and not isinstance(codec, FixedCodec):
            names |= {f"codec.{n}" for n, _ in codec.named_parameters()}
    return names


def _derive(seed: int, *parts) -> int:
    blob = ":".join([str(seed)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:8], "little")


def _center_crop(pair: ImagePair, crop: int) -> ImagePair:
    h, w = pair.sharp.shape[-2], pair.sharp.shape[-1]
    if crop >= h and crop >= w:
        return pair
    i, j = (h - crop) // 2, (w - crop) // 2
    return ImagePair(
        pair.sharp[..., i : i + crop, j : j + crop],
        pair.blur[..., i : i + crop, j : j + crop],
        pair.pair_id,
    )


def _crop_pair(pair: ImagePair, crop: int, seed: int) -> ImagePair:
    h, w = pair.sharp.shape[-2], pair.sharp.shape[-1]
    if crop >= h and crop >= w:
        return pair
    rng = np.random.default_rng(seed)
    i = int(rng.integers(0, h - crop + 1))
    j = int(rng.integers(0, w - crop + 1))
    return ImagePair(
        pair.sharp[..., i : i + crop, j : j + crop],
        pair.blur[..., i : i + crop, j : j + crop],
        pair.pair_id,
    )


def batch_flow_loss(net, codec, examples):
    """Mean flow loss over (pair, kind, t, noise_seed, start) examples.

    Each example's state is encoded separately (skips differ per image),
    the field network runs once over the stacked latents, and decoded
    predictions score against each path target. The batch loss is the
    mean of per-example losses.
    """
    encoded, samples = [], []
    for pair, kind, t, noise_seed, start in examples:
        work = pair if start is None else ImagePair(pair.sharp, start, pair.pair_id)
        s = sample_path(work, kind, t, noise_seed)
        encoded.append(codec.encode(s.x_t))
        samples.append(s)
    z = torch.stack([ls.z_r for ls in encoded])
    tvec = torch.tensor([s.t for s in samples], dtype=z.dtype)
    v = net(z, tvec)
    losses = []
    for i, (ls, s) in enumerate(zip(encoded, samples)):
        pred = codec.decode(v[i], ls.skips, ls.source_shape)
        losses.append(((pred - s.target_v) ** 2).mean())
    return torch.stack(losses).mean()


def _restorer_batch_loss(module, pairs):
    y = torch.stack([p.blur for p in pairs])
    r = torch.stack([p.residual for p in pairs])
    return ((module(y) - r) ** 2).mean()


def model_config_of(config: TrainConfig) -> ModelConfig:
    return ModelConfig(
        latent_channels=config.latent_channels, grid=config.grid,
        channels=config.channels, depth=config.depth, heads=config.heads,
        time_embed_dim=config.time_embed_dim, seed=config.seed,
    )


def codec_config_of(config: TrainConfig) -> CodecConfig:
    return CodecConfig(
        stages=config.codec_stages, base_channels=config.codec_base_channels,
        latent_channels=config.latent_channels, seed=config.seed,
    )


def load_stage0_expert(run_dir) -> ToyRestorer:
    meta, groups = load_checkpoint(Path(run_dir) / "checkpoints" / "final")
    if meta.get("stage") != 0:
        raise DependencyError(f"{run_dir} is not a stage-0 run")
    arch = meta["expert_arch"]
    module = ToyRestorer(channels=arch["channels"], width=arch["width"],
                         depth=arch["depth"], seed=arch["seed"])
    module.load_state_dict(groups["expert"])
    return module


def load_stage1_net(run_dir) -> VectorFieldNet:
    meta, groups = load_checkpoint(Path(run_dir) / "checkpoints" / "final")
    if meta.get("stage") != 1:
        raise DependencyError(f"{run_dir} is not a stage-1 run")
    net = build_net(ModelConfig(**meta["model_arch"]))
    net.load_state_dict(groups["net"])
    return net


def load_stage2_runtime(run_dir):
    """Rebuild (net, codec, meta) from a finished stage-2 run directory.

    When the run co-trained against the toy restorer, its weights travel
    inside the checkpoint and the expert is re-registered here, so a
    single run directory is enough to sample from.
    """
    meta, groups = load_checkpoint(Path(run_dir) / "checkpoints" / "final")
    if meta.get("stage") != 2:
        raise DependencyError(f"{run_dir} is not a stage-2 run")
    net = build_net(ModelConfig(**meta["model_arch"]))
    lora = meta["lora"]
    add_adapters(net, LoraConfig(rank=lora["rank"], alpha=lora["alpha"],
                                 targets=tuple(lora["targets"]), seed=lora["seed"]))
    net.load_state_dict(groups["net"])
    if meta["codec_kind"] == "fixed":
        codec = FixedCodec(stages=meta["codec_arch"]["stages"])
    else:
        codec = build_codec(CodecConfig(**meta["codec_arch"]))
        codec.load_state_dict(groups["codec"])
    if meta.get("expert") == "toy-restorer" and "expert" in groups:
        arch = meta["expert_arch"]
        module = ToyRestorer(channels=arch["channels"], width=arch["width"],
                             depth=arch["depth"], seed=arch["seed"])
        module.load_state_dict(groups["expert"])
        make_restorer_expert(module, "toy-restorer")
    return net, codec, meta


def _ensure_stage0_expert(config: TrainConfig, stage0_run):
    """Register the configured expert; returns (module, arch meta) or None."""
    if config.expert == "identity":
        return None
    if config.expert == "toy-restorer":
        if stage0_run is None:
            raise DependencyError(
                "stage 2 with the toy-restorer expert needs a stage-0 run directory"
            )
        meta, _ = load_checkpoint(Path(stage0_run) / "checkpoints" / "final")
        module = load_stage0_expert(stage0_run)
        make_restorer_expert(module, "toy-restorer")
        return module, meta["expert_arch"]
    get_expert(config.expert)  # raises NotFoundError for unknown ids
    return None


def train_stage(stage: int, config: TrainConfig, data_root, out_dir,
                stage0_run=None, stage1_run=None) -> RunRecord:
    """Run one training stage end to end and persist its artifacts."""
    if stage not in STAGES:
        raise InvalidArgumentError(f"unknown stage {stage}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(out_dir / "config.ini", config)

    train_pairs = [pair_to_tensors(p) for p in load_split(data_root, "train")]
    val_pairs = [pair_to_tensors(p) for p in load_split(data_root, "val")]
    if not train_pairs:
        raise DependencyError(f"no training pairs under {data_root}")
    h, w = train_pairs[0].sharp.shape[-2], train_pairs[0].sharp.shape[-1]
    if config.crop > min(h, w):
        raise InvalidArgumentError(
            f"crop {config.crop} exceeds the {h}x{w} training images"
        )
    # evaluation shares the network's token grid, so hold out fixed
    # center crops rather than full frames
    val_pairs = [_center_crop(p, config.crop) for p in val_pairs]

    if stage == 0:
        modules, loss_of_batch, params, val_fn, meta_extra = _setup_stage0(config)
    elif stage == 1:
        modules, loss_of_batch, params, val_fn, meta_extra = _setup_stage1(config)
    else:
        modules, loss_of_batch, params, val_fn, meta_extra = _setup_stage2(
            config, stage0_run, stage1_run
        )

    opt_cfg = OptimConfig(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                          weight_decay=config.weight_decay, eps=config.eps)
    opt_state = init_optimizer_state(params)
    steps_per_epoch = max(1, math.ceil(len(train_pairs) / config.batch))
    total_steps = steps_per_epoch * config.epochs

    record = RunRecord(stage=stage, config_hash=config_hash(config))
    global_step = 0
    for epoch in range(config.epochs):
        tic = time.monotonic()
        order = np.random.default_rng(_derive(config.seed, "order", epoch)).permutation(
            len(train_pairs)
        )
        epoch_losses = []
        for b0 in range(0, len(order), config.batch):
            idxs = order[b0 : b0 + config.batch]
            lr = cosine_lr(global_step, total_steps, config.lr, config.lr_floor_frac)
            batch = [
                _crop_pair(train_pairs[i], config.crop, _derive(config.seed, "crop", epoch, int(i)))
                for i in idxs
            ]
            loss = loss_of_batch(batch, epoch, int(b0))
            if not torch.isfinite(loss):
                raise NumericFailureError(
                    f"non-finite loss at epoch {epoch} step {global_step}", step=global_step
                )
            for p in params:
                p.grad = None
            loss.backward()
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
            clip_gradients(grads, config.grad_clip)
            optimizer_step(params, grads, opt_state, opt_cfg, lr=lr)
            epoch_losses.append(float(loss.detach()))
            global_step += 1

        val_loss, val_psnr_db = val_fn(
            val_pairs, epoch, epoch % config.val_every == 0 or epoch == config.epochs - 1
        )
        record.rows.append(EpochRow(
            epoch, float(np.mean(epoch_losses)), val_loss, val_psnr_db,
            cosine_lr(global_step - 1, total_steps, config.lr, config.lr_floor_frac),
            time.monotonic() - tic,
        ))

    ckpt_dir = out_dir / "checkpoints" / "final"
    meta = _checkpoint_meta(stage, config)
    meta.update(meta_extra)
    save_checkpoint(ckpt_dir, modules, meta)
    record.checkpoint_dir = str(ckpt_dir)
    finals = [r.val_psnr for r in record.rows if not math.isnan(r.val_psnr)]
    record.final_val_psnr = finals[-1] if finals else float("nan")
    record.save_csv(out_dir / "record.csv")
    return record


def _checkpoint_meta(stage: int, config: TrainConfig) -> dict:
    meta = {"stage": stage, "config_hash": config_hash(config)}
    if stage == 0:
        meta["expert_arch"] = {"channels": 3, "width": config.expert_width,
                               "depth": config.expert_depth, "seed": config.seed}
    else:
        meta["model_arch"] = asdict(model_config_of(config))
        if stage == 2:
            meta["lora"] = {"rank": config.lora_rank, "alpha": config.lora_alpha,
                            "targets": list(("Wq", "Wk", "Wv", "Wo")), "seed": config.seed}
            meta["codec_kind"] = config.codec
            if config.codec == "fixed":
                meta["codec_arch"] = {"stages": config.codec_stages}
            else:
                meta["codec_arch"] = asdict(codec_config_of(config))
            meta["path_kind"] = config.path_kind
            meta["rho"] = config.rho
            meta["expert"] = config.expert
            meta["sampler_steps"] = config.val_steps
    return meta


def _setup_stage0(config: TrainConfig):
    module = ToyRestorer(width=config.expert_width, depth=config.expert_depth,
                         seed=config.seed)
    params = list(module.parameters())

    def loss_of_batch(batch, epoch, b0):
        return _restorer_batch_loss(module, batch)

    def val_fn(val_pairs, epoch, run_psnr):
        with torch.no_grad():
            vloss = float(_restorer_batch_loss(module, val_pairs)) if val_pairs else 0.0
            if not run_psnr or not val_pairs:
                return vloss, float("nan")
            scores = [
                psnr(module.restore(p.blur).numpy(), p.sharp.numpy())
                for p in val_pairs
            ]
        return vloss, float(np.mean(scores))

    return {"expert": module}, loss_of_batch, params, val_fn, {}


def _setup_stage1(config: TrainConfig):
    expected = 3 * 4**config.codec_stages
    if config.latent_channels != expected:
        raise InvalidArgumentError(
            f"stage 1 trains through the fixed codec: latent_channels must be "
            f"{expected} for {config.codec_stages} stages, got {config.latent_channels}"
        )
    net = build_net(model_config_of(config))
    codec = FixedCodec(stages=config.codec_stages)
    params = list(net.parameters())
    kind = PathKind.GEN_NOISE_TO_CLEAN

    def loss_of_batch(batch, epoch, b0):
        examples = []
        for k, pair in enumerate(batch):
            t = draw_time(config.time_schedule, _derive(config.seed, "t", epoch, b0, k))
            noise_seed = _derive(config.seed, "noise", epoch, b0, k)
            sharp_only = ImagePair(pair.sharp, pair.sharp, pair.pair_id)
            examples.append((sharp_only, kind, t, noise_seed, None))
        return batch_flow_loss(net, codec, examples)

    def val_fn(val_pairs, epoch, run_psnr):
        if not val_pairs:
            return 0.0, float("nan")
        with torch.no_grad():
            examples = [
                (ImagePair(p.sharp, p.sharp, p.pair_id), kind,
                 draw_time(config.time_schedule, _derive(config.seed, "valt", k)),
                 _derive(config.seed, "valnoise", k), None)
                for k, p in enumerate(val_pairs)
            ]
            vloss = float(batch_flow_loss(net, codec, examples))
        return vloss, float("nan")

    return {"net": net}, loss_of_batch, params, val_fn, {}


def _setup_stage2(config: TrainConfig, stage0_run, stage1_run):
    if stage1_run is None:
        raise DependencyError("stage 2 needs a stage-1 run directory for the base network")
    net = load_stage1_net(stage1_run)
    if asdict(net.config) != asdict(model_config_of(config)):
        raise DependencyError(
            "stage-1 network architecture does not match this stage-2 config"
        )
    add_adapters(net, LoraConfig(rank=config.lora_rank, alpha=config.lora_alpha,
                                 seed=config.seed))
    codec = FixedCodec(stages=config.codec_stages) if config.codec == "fixed" \
        else build_codec(codec_config_of(config))
    expert_info = _ensure_stage0_expert(config, stage0_run)
    modules = {"net": net, "codec": codec}
    meta_extra = {}
    if expert_info is not None:
        modules["expert"] = expert_info[0]
        meta_extra["expert_arch"] = expert_info[1]

    params = trainable_params(net) + [p for p in codec.parameters() if p.requires_grad]
    kind = PathKind(config.path_kind)
    cotrain = CoTrainConfig(rho=config.rho, expert=config.expert, seed=config.seed)

    def loss_of_batch(batch, epoch, b0):
        examples = []
        for k, pair in enumerate(batch):
            t = draw_time(config.time_schedule, _derive(config.seed, "t", epoch, b0, k))
            noise_seed = _derive(config.seed, "noise", epoch, b0, k)
            start = None
            if kind == PathKind.DEBLUR_BLUR_TO_CLEAN:
                start, _ = draw_training_pair(
                    cotrain, pair, _derive(config.seed, "draw", epoch, b0, k)
                )
                if start is pair.blur:
                    start = None  # raw-blur draws use the pair as-is
            examples.append((pair, kind, t, noise_seed, start))
        return batch_flow_loss(net, codec, examples)

    expert_id = config.expert if config.expert != "identity" else None

    def val_fn(val_pairs, epoch, run_psnr):
        if not val_pairs:
            return 0.0, float("nan")
        with torch.no_grad():
            examples = [
                (p, kind, draw_time(config.time_schedule, _derive(config.seed, "valt", k)),
                 _derive(config.seed, "valnoise", k), None)
                for k, p in enumerate(val_pairs)
            ]
            vloss = float(batch_flow_loss(net, codec, examples))
            if not run_psnr:
                return vloss, float("nan")
            scores = []
            for k, p in enumerate(val_pairs):
                x_hat = restore_for_path(net, codec, kind, p.blur, config.val_steps,
                                         expert_id=expert_id,
                                         noise_seed=_derive(config.seed, "valsample", k))
                scores.append(psnr(x_hat.numpy(), p.sharp.numpy()))
        return vloss, float(np.mean(scores))

    return modules, loss_of_batch, params, val_fn, meta_extra
