import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from deblurflow.degrade import KernelSpec, build_dataset, load_split, synthesize_sharp_images
from deblurflow.errors import (
    DependencyError,
    InvalidArgumentError,
    NotFoundError,
    NumericFailureError,
)
from deblurflow.flowcore import PathKind
from deblurflow.model import LoraConfig, ModelConfig, add_adapters, build_net, load_checkpoint
from deblurflow.rspace import CodecConfig, FixedCodec, build_codec, pair_to_tensors
from deblurflow.trainer import (
    OptimConfig,
    TrainConfig,
    batch_flow_loss,
    clip_gradients,
    config_from_mapping,
    config_hash,
    cosine_lr,
    freeze_mask,
    init_optimizer_state,
    load_config,
    load_stage1_net,
    load_stage2_runtime,
    optimizer_step,
    read_record_csv,
    save_config,
    train_stage,
)

TINY = TrainConfig(
    epochs=2, batch=4, crop=32, channels=32, depth=1, heads=2, grid=4,
    expert_width=8, expert_depth=2, val_every=1, lora_rank=2,
    codec_base_channels=8, seed=3,
)


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("data")
    src = tmp / "sharp"
    synthesize_sharp_images(src, 10, size=32, seed=7)
    build_dataset(src, tmp / "set", KernelSpec(size=7, extent_range=(3, 5)), seed=7)
    return tmp / "set"


@pytest.fixture(scope="module")
def stage0_run(tmp_path_factory, data_root):
    out = tmp_path_factory.mktemp("runs") / "s0"
    train_stage(0, TINY, data_root, out)
    return out


@pytest.fixture(scope="module")
def stage1_run(tmp_path_factory, data_root):
    out = tmp_path_factory.mktemp("runs") / "s1"
    train_stage(1, TINY, data_root, out)
    return out


@pytest.fixture(scope="module")
def stage2_run(tmp_path_factory, data_root, stage0_run, stage1_run):
    out = tmp_path_factory.mktemp("runs") / "s2"
    record = train_stage(2, TINY, data_root, out, stage0_run=stage0_run,
                         stage1_run=stage1_run)
    return out, record


# ---------------------------------------------------------------- optimizer

def _hand_step(p, g, lr, b1, b2, wd, eps, steps=1):
    """Reference update on python floats (all float64 arithmetic)."""
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * wd * p - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


def test_optimizer_single_step_matches_hand_oracle():
    cfg = OptimConfig(lr=0.01, beta1=0.9, beta2=0.9, weight_decay=0.1, eps=1e-8)
    p = torch.tensor([1.0], dtype=torch.float64)
    g = torch.tensor([0.5], dtype=torch.float64)
    state = init_optimizer_state([p])
    optimizer_step([p], [g], state, cfg)
    expected = _hand_step(1.0, 0.5, 0.01, 0.9, 0.9, 0.1, 1e-8)
    assert abs(float(p) - expected) < 1e-12


def test_optimizer_bias_correction_over_three_steps():
    # constant gradient; the t in the bias correction must advance
    cfg = OptimConfig(lr=0.02, beta1=0.9, beta2=0.9, weight_decay=0.05, eps=1e-8)
    p = torch.tensor([0.7], dtype=torch.float64)
    g = torch.tensor([-0.3], dtype=torch.float64)
    state = init_optimizer_state([p])
    for _ in range(3):
        optimizer_step([p], [g], state, cfg)
    expected = _hand_step(0.7, -0.3, 0.02, 0.9, 0.9, 0.05, 1e-8, steps=3)
    assert abs(float(p) - expected) < 1e-12
    assert state["step"] == 3


def test_optimizer_zero_grad_zero_decay_leaves_param():
    cfg = OptimConfig(lr=0.1, weight_decay=0.0)
    p = torch.tensor([2.5])
    state = init_optimizer_state([p])
    optimizer_step([p], [torch.zeros(1)], state, cfg)
    assert float(p) == 2.5


def test_optimizer_lr_override_wins():
    cfg = OptimConfig(lr=0.5, weight_decay=0.0)
    p = torch.tensor([1.0], dtype=torch.float64)
    state = init_optimizer_state([p])
    optimizer_step([p], [torch.tensor([1.0], dtype=torch.float64)], state, cfg, lr=0.0)
    assert float(p) == 1.0


def test_optimizer_shape_mismatch_rejected():
    cfg = OptimConfig()
    p = torch.zeros(3)
    state = init_optimizer_state([p])
    with pytest.raises(InvalidArgumentError):
        optimizer_step([p], [torch.zeros(4)], state, cfg)
    with pytest.raises(InvalidArgumentError):
        optimizer_step([p], [], state, cfg)


def test_cosine_schedule_endpoints_and_monotone():
    lrs = [cosine_lr(s, 100, 1e-4, 0.01) for s in range(100)]
    assert lrs[0] == pytest.approx(1e-4)
    assert lrs[-1] <= 0.01 * 1e-4 + 1e-15
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(0, 1, 1e-4, 0.01) == pytest.approx(1e-6)


def test_clip_rescales_only_above_threshold():
    g = [torch.tensor([3.0, 4.0])]  # norm 5
    total = clip_gradients(g, 1.0)
    assert total == pytest.approx(5.0)
    assert float(torch.linalg.norm(g[0])) == pytest.approx(1.0, abs=1e-6)
    g2 = [torch.tensor([0.3, 0.4])]
    clip_gradients(g2, 1.0)
    assert torch.equal(g2[0], torch.tensor([0.3, 0.4]))


# ------------------------------------------------------------------ config

def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(lr=-1e-4)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(rho=1.5)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(path_kind="bogus")
    with pytest.raises(InvalidArgumentError):
        TrainConfig(codec="jpeg")
    with pytest.raises(InvalidArgumentError):
        TrainConfig(beta2=1.0)
    TrainConfig(lr=0.0)  # zero step size is allowed


def test_config_hash_stable_and_sensitive():
    a = config_hash(TINY)
    assert a == config_hash(replace(TINY))
    assert a != config_hash(replace(TINY, lr=2e-4))
    assert len(a) == 12


def test_config_roundtrip(tmp_path):
    path = tmp_path / "config.ini"
    save_config(path, TINY)
    assert load_config(path) == TINY
    with pytest.raises(NotFoundError):
        load_config(tmp_path / "missing.ini")


def test_config_mapping_rejects_unknown_key():
    with pytest.raises(InvalidArgumentError):
        config_from_mapping({"learning_rate": "0.1"})


# ------------------------------------------------------------- freeze mask

def test_freeze_mask_unknown_stage():
    with pytest.raises(InvalidArgumentError):
        freeze_mask(7)


def test_freeze_mask_stage1_is_all_base_names():
    net = build_net(ModelConfig(12, 4, 16, 1, 2, time_embed_dim=8))
    mask = freeze_mask(1, net=net)
    assert mask == {f"net.{n}" for n, _ in net.named_parameters()}


def test_freeze_mask_stage2_disjoint_from_base():
    net = build_net(ModelConfig(12, 4, 16, 1, 2, time_embed_dim=8))
    base = {f"net.{n}" for n, _ in net.named_parameters()}
    add_adapters(net, LoraConfig(rank=2, seed=0))
    codec = build_codec(CodecConfig(stages=2, base_channels=4, latent_channels=12))
    mask = freeze_mask(2, net=net, codec=codec)
    assert mask, "stage-2 mask must not be empty"
    assert not mask & base
    for name in mask:
        assert "lora_" in name or name.startswith("codec.")


def test_freeze_mask_stage2_fixed_codec_is_adapters_only():
    net = build_net(ModelConfig(12, 4, 16, 1, 2, time_embed_dim=8))
    add_adapters(net, LoraConfig(rank=2, seed=0))
    mask = freeze_mask(2, net=net, codec=FixedCodec(stages=2))
    assert mask and all("lora_" in n for n in mask)


# --------------------------------------------------------- batch gradients

def _micro_examples(seed):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(2):
        sharp = rng.uniform(0.2, 0.8, (3, 16, 16)).astype(np.float32)
        blur = np.clip(sharp + rng.normal(0, 0.05, sharp.shape), 0, 1).astype(np.float32)
        from deblurflow.degrade import ImagePair
        pairs.append(ImagePair(torch.from_numpy(sharp), torch.from_numpy(blur), f"p{i}"))
    return [
        (pairs[0], PathKind.DEBLUR_BLUR_TO_CLEAN, 0.4, 11, None),
        (pairs[1], PathKind.DEBLUR_BLUR_TO_CLEAN, 0.9, 12, None),
    ]


def test_batch_loss_gradient_is_mean_of_per_example_gradients():
    net = build_net(ModelConfig(48, 2, 16, 1, 2, time_embed_dim=8, seed=5))
    codec = build_codec(CodecConfig(stages=3, base_channels=4, latent_channels=48, seed=5))
    params = list(net.parameters()) + list(codec.parameters())
    e1, e2 = _micro_examples(0)

    def grads_of(examples):
        loss = batch_flow_loss(net, codec, examples)
        gs = torch.autograd.grad(loss, params, allow_unused=True)
        return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]

    joint = grads_of([e1, e2])
    g1, g2 = grads_of([e1]), grads_of([e2])
    for j, a, b in zip(joint, g1, g2):
        assert torch.allclose(j, (a + b) / 2, atol=1e-6, rtol=1e-5)


# -------------------------------------------------------------- train runs

def test_stage0_writes_run_artifacts(stage0_run):
    assert (stage0_run / "config.ini").exists()
    assert (stage0_run / "checkpoints" / "final" / "manifest.json").exists()
    rows = read_record_csv(stage0_run / "record.csv")
    assert len(rows) == TINY.epochs
    assert all(math.isfinite(r.train_loss) for r in rows)
    assert rows[0].lr > rows[-1].lr


def test_stage2_requires_prerequisites(tmp_path, data_root, stage0_run, stage1_run):
    with pytest.raises(DependencyError):
        train_stage(2, TINY, data_root, tmp_path / "a", stage0_run=stage0_run)
    with pytest.raises(DependencyError):
        # toy-restorer co-training without a stage-0 expert
        train_stage(2, TINY, data_root, tmp_path / "b", stage1_run=stage1_run)
    with pytest.raises(DependencyError):
        # a stage-0 checkpoint is not a stage-1 checkpoint
        load_stage1_net(stage0_run)


def test_stage1_latent_channels_must_match_fixed_codec(tmp_path, data_root):
    bad = replace(TINY, latent_channels=100)
    with pytest.raises(InvalidArgumentError):
        train_stage(1, bad, data_root, tmp_path / "bad")


def test_crop_larger_than_images_rejected(tmp_path, data_root):
    with pytest.raises(InvalidArgumentError):
        train_stage(0, replace(TINY, crop=64), data_root, tmp_path / "big")


def test_empty_dataset_rejected(tmp_path):
    (tmp_path / "manifest.csv").write_text("id,split,kernel_kind,kernel_seed\n")
    with pytest.raises(DependencyError):
        train_stage(0, TINY, tmp_path, tmp_path / "out")


def test_unknown_stage_rejected(tmp_path, data_root):
    with pytest.raises(InvalidArgumentError):
        train_stage(3, TINY, data_root, tmp_path / "out")


def test_stage2_freeze_contract_base_params_untouched(stage2_run, stage1_run):
    out, _ = stage2_run
    _, s1_groups = load_checkpoint(stage1_run / "checkpoints" / "final")
    _, s2_groups = load_checkpoint(out / "checkpoints" / "final")
    base_before = s1_groups["net"]
    after = s2_groups["net"]
    checked = 0
    for name, tensor in after.items():
        if "lora_" in name:
            continue
        original = name.replace(".base.", ".") if ".base." in name else name
        assert torch.equal(tensor, base_before[original]), name
        checked += 1
    assert checked == len(base_before)


def test_stage2_adapters_or_codec_actually_moved(stage2_run):
    out, _ = stage2_run
    _, groups = load_checkpoint(out / "checkpoints" / "final")
    lora_norm = sum(float(v.abs().sum()) for k, v in groups["net"].items() if "lora_a" in k)
    assert lora_norm > 0  # seeded init, never trained to exact zero
    moved = any(float(v.abs().sum()) > 0
                for k, v in groups["net"].items() if "lora_b" in k)
    assert moved, "zero-init adapter factors should move during training"


def test_stage2_lr_zero_keeps_params_bit_exact(tmp_path, data_root, stage0_run, stage1_run):
    frozen = replace(TINY, lr=0.0, epochs=1)
    out = tmp_path / "frozen"
    train_stage(2, frozen, data_root, out, stage0_run=stage0_run, stage1_run=stage1_run)
    _, groups = load_checkpoint(out / "checkpoints" / "final")

    net = load_stage1_net(stage1_run)
    add_adapters(net, LoraConfig(rank=frozen.lora_rank, alpha=frozen.lora_alpha,
                                 seed=frozen.seed))
    codec = build_codec(CodecConfig(stages=frozen.codec_stages,
                                    base_channels=frozen.codec_base_channels,
                                    latent_channels=frozen.latent_channels,
                                    seed=frozen.seed))
    for name, tensor in net.state_dict().items():
        assert torch.equal(groups["net"][name], tensor), name
    for name, tensor in codec.state_dict().items():
        assert torch.equal(groups["codec"][name], tensor), name


def test_stage2_rerun_is_deterministic(tmp_path, data_root, stage0_run, stage1_run):
    a = train_stage(2, TINY, data_root, tmp_path / "a", stage0_run=stage0_run,
                    stage1_run=stage1_run)
    b = train_stage(2, TINY, data_root, tmp_path / "b", stage0_run=stage0_run,
                    stage1_run=stage1_run)
    assert abs(a.final_val_psnr - b.final_val_psnr) < 1e-3
    assert abs(a.rows[-1].train_loss - b.rows[-1].train_loss) < 1e-5


def test_stage2_runtime_roundtrip(stage2_run, data_root):
    out, record = stage2_run
    from deblurflow.expert import _REGISTRY, get_expert
    _REGISTRY.pop("toy-restorer", None)
    net, codec, meta = load_stage2_runtime(out)
    # the co-training expert ships inside the checkpoint and comes back
    get_expert("toy-restorer")
    assert meta["path_kind"] == "deblur"
    assert meta["rho"] == pytest.approx(0.7)
    pair = pair_to_tensors(load_split(data_root, "val")[0])
    ls = codec.encode(pair.blur[:, :32, :32])
    out_field = codec.decode(net(ls.z_r, 0.5), ls.skips, ls.source_shape)
    assert out_field.shape == (3, 32, 32)
    assert torch.isfinite(out_field).all()


def test_record_csv_roundtrip(stage2_run):
    out, record = stage2_run
    rows = read_record_csv(out / "record.csv")
    assert len(rows) == len(record.rows)
    for disk, mem in zip(rows, record.rows):
        assert disk.epoch == mem.epoch
        assert disk.train_loss == pytest.approx(mem.train_loss, abs=1e-8)
        if math.isnan(mem.val_psnr):
            assert math.isnan(disk.val_psnr)
        else:
            assert disk.val_psnr == pytest.approx(mem.val_psnr, abs=1e-4)


def test_divergent_lr_raises_numeric_failure(tmp_path, data_root):
    wild = replace(TINY, lr=1e8, epochs=3)
    with pytest.raises(NumericFailureError) as err:
        train_stage(0, wild, data_root, tmp_path / "wild")
    assert "epoch" in str(err.value)
    assert isinstance(err.value.step, int)


def test_stage2_loss_starts_at_zero_predictor_baseline_and_falls(tmp_path, data_root):
    # with the decoder head at zero the first prediction is exactly zero,
    # so the first recorded losses sit at mean((start - sharp)^2); rho=1
    # keeps every start at the raw blur, making the baseline analytic
    pairs = [pair_to_tensors(p) for p in load_split(data_root, "train")]
    baseline = float(np.mean([float((p.residual**2).mean()) for p in pairs]))
    cfg = replace(TINY, lr=1e-3, epochs=12, batch=4, rho=1.0, expert="identity",
                  val_every=100)
    s1 = tmp_path / "s1"
    train_stage(1, cfg, data_root, s1)
    record = train_stage(2, cfg, data_root, tmp_path / "s2", stage1_run=s1)
    first = record.rows[0].train_loss
    assert first == pytest.approx(baseline, rel=0.05)
    tail = [r.train_loss for r in record.rows[-4:]]
    assert all(t < baseline for t in tail)
    assert record.rows[-1].train_loss < first
