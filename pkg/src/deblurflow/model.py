"""Time-conditioned vector-field network with low-rank adapters.

A small pre-norm transformer over a flattened latent grid predicts the
path velocity. The base weights act as the frozen prior; low-rank
adapters on the attention projections carry all task-specific updates.
Checkpoints are plain directories: manifest.json plus one .npy file per
parameter tensor (little-endian float32 with shape header).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgumentError, NotFoundError

LORA_TARGETS = ("Wq", "Wk", "Wv", "Wo")
_TARGET_ATTR = {"Wq": "q", "Wk": "k", "Wv": "v", "Wo": "o"}


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 192
    grid: int = 8
    channels: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    time_embed_dim: int = 64
    seed: int = 0


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple = LORA_TARGETS
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise InvalidArgumentError(f"rank must be >= 1, got {self.rank}")
        bad = [t for t in self.targets if t not in LORA_TARGETS]
        if bad:
            raise InvalidArgumentError(f"unknown adapter targets {bad}")


# full-scale preset for bigger backbones; desk default is rank 4
FULL_SCALE_LORA = LoraConfig(rank=32, alpha=64.0)


def time_embedding(t, dim: int):
    """Sinusoidal features of t, first half sin, second half cos.

    Frequencies span 1..1000 geometrically so nearby times stay
    distinguishable while the lowest band is monotone on [0,1].
    """
    if dim % 2 != 0:
        raise InvalidArgumentError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=torch.float64))
    tt = torch.as_tensor(t, dtype=torch.float64)
    ang = tt.reshape(-1, 1) * freqs if tt.ndim > 0 else tt * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return emb.to(torch.get_default_dtype())


def _grid_positional(channels: int, grid: int) -> torch.Tensor:
    """2D sinusoidal positions: half the channels for rows, half for columns."""
    quarter = channels // 4
    freqs = torch.exp(torch.linspace(0.0, math.log(100.0), quarter))
    pos = torch.arange(grid, dtype=torch.float32)
    ang = pos[:, None] * freqs[None, :]
    table = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)  # grid x 2q
    rows = table[:, None, :].expand(grid, grid, -1)
    cols = table[None, :, :].expand(grid, grid, -1)
    pe = torch.cat([rows, cols], dim=-1)
    if pe.shape[-1] < channels:
        pe = torch.cat([pe, torch.zeros(grid, grid, channels - pe.shape[-1])], dim=-1)
    return pe.reshape(grid * grid, channels)


class SelfAttention(nn.Module):
    """Multi-head attention with separate q/k/v/o projections.

    Kept unfused so adapters can target each projection on its own.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise InvalidArgumentError("channels must divide evenly into heads")
        self.heads = heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.o = nn.Linear(channels, channels)

    def forward(self, h):
        b, n, c = h.shape
        d = c // self.heads

        def split(x):
            return x.view(b, n, self.heads, d).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, c)
        return self.o(out)


class Block(nn.Module):
    def __init__(self, channels: int, heads: int, mlp_ratio: float, time_dim: int):
        super().__init__()
        self.time_proj = nn.Linear(time_dim, channels)
        self.norm1 = nn.LayerNorm(channels)
        self.attn = SelfAttention(channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        hidden = int(channels * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels)
        )

    def forward(self, h, temb):
        h = h + self.time_proj(temb).unsqueeze(-2)
        h = h + self.attn(self.norm1(h))
        h = h + self.mlp(self.norm2(h))
        return h


class VectorFieldNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.in_proj = nn.Linear(config.latent_channels, config.channels)
        self.blocks = nn.ModuleList(
            Block(config.channels, config.heads, config.mlp_ratio, config.time_embed_dim)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.channels)
        self.out_proj = nn.Linear(config.channels, config.latent_channels)
        self.register_buffer("pos", _grid_positional(config.channels, config.grid))

    def forward(self, z, t):
        cfg = self.config
        batched = z.ndim == 4
        if not batched:
            z = z.unsqueeze(0)
        if z.shape[1:] != (cfg.latent_channels, cfg.grid, cfg.grid):
            raise InvalidArgumentError(
                f"latent shape {tuple(z.shape[1:])} does not match "
                f"({cfg.latent_channels}, {cfg.grid}, {cfg.grid})"
            )
        if not torch.isfinite(z).all():
            raise InvalidArgumentError("non-finite values in latent input")
        tt = torch.as_tensor(t, dtype=torch.float64)
        if not bool(((tt >= 0) & (tt <= 1)).all()):
            raise InvalidArgumentError(f"t must lie in [0,1], got {t}")

        temb = time_embedding(t, cfg.time_embed_dim).to(z.dtype)
        if temb.ndim == 1:
            temb = temb.expand(z.shape[0], -1)

        h = self.in_proj(z.flatten(2).transpose(1, 2)) + self.pos.to(z.dtype)
        for block in self.blocks:
            h = block(h, temb)
        out = self.out_proj(self.norm(h))
        out = out.transpose(1, 2).reshape(z.shape)
        return out if batched else out.squeeze(0)


def build_net(config: ModelConfig) -> VectorFieldNet:
    """Construct a network with init drawn deterministically from config.seed."""
    torch.manual_seed(config.seed)
    return VectorFieldNet(config)


class LoraLinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank delta.

    Applies base(x) + (alpha/rank) * B(A(x)); B starts at zero so the
    wrapped layer initially computes exactly what the base did.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.normal_(self.lora_a, std=1.0 / rank)
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        delta = nn.functional.linear(nn.functional.linear(x, self.lora_a), self.lora_b)
        return self.base(x) + self.scaling * delta

    def merged(self) -> nn.Linear:
        out = nn.Linear(self.base.in_features, self.base.out_features)
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.scaling * (self.lora_b @ self.lora_a))
            out.bias.copy_(self.base.bias)
        return out


def add_adapters(net: VectorFieldNet, config: LoraConfig) -> VectorFieldNet:
    """Attach adapters to the chosen attention projections and freeze the base.

    Mutates the network in place and returns it. After this call the only
    parameters with gradients enabled are the adapter factors.
    """
    torch.manual_seed(config.seed)
    for p in net.parameters():
        p.requires_grad_(False)
    for block in net.blocks:
        for target in config.targets:
            attr = _TARGET_ATTR[target]
            base = getattr(block.attn, attr)
            if isinstance(base, LoraLinear):
                raise InvalidArgumentError(f"adapter already attached on {target}")
            setattr(block.attn, attr, LoraLinear(base, config.rank, config.alpha))
    net.lora_config = config
    return net


def adapter_modules(net: VectorFieldNet) -> dict:
    found = {}
    for name, mod in net.named_modules():
        if isinstance(mod, LoraLinear):
            found[name] = mod
    return found


def trainable_params(net: VectorFieldNet) -> list:
    """Adapter factors only; the frozen base never appears here."""
    params = []
    for mod in adapter_modules(net).values():
        params.extend([mod.lora_a, mod.lora_b])
    return params


def merge_adapters(net: VectorFieldNet) -> VectorFieldNet:
    """Fold every adapter delta into dense weights on a fresh copy."""
    merged = copy.deepcopy(net)
    for block in merged.blocks:
        for attr in _TARGET_ATTR.values():
            layer = getattr(block.attn, attr)
            if isinstance(layer, LoraLinear):
                setattr(block.attn, attr, layer.merged())
    if hasattr(merged, "lora_config"):
        del merged.lora_config
    return merged


def save_checkpoint(path, modules: dict, meta: dict) -> None:
    """Write modules to a checkpoint directory.

    One .npy per tensor, float32 little-endian; manifest.json records
    metadata and the tensor index.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    for group, module in modules.items():
        for key, tensor in module.state_dict().items():
            fname = f"{group}.{key}.npy"
            np.save(path / fname, tensor.detach().cpu().numpy().astype("<f4"))
            index[f"{group}.{key}"] = fname
    manifest = dict(meta)
    manifest["format"] = 1
    manifest["tensors"] = index
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Read (meta, {group: state_dict}) back from a checkpoint directory."""
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise NotFoundError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text())
    groups: dict = {}
    for full_key, fname in manifest["tensors"].items():
        group, key = full_key.split(".", 1)
        arr = np.load(path / fname)
        groups.setdefault(group, {})[key] = torch.from_numpy(arr.astype(np.float32))
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return meta, groups


def load_into(module: nn.Module, state: dict) -> None:
    module.load_state_dict({k: v for k, v in state.items()}, strict=True)
