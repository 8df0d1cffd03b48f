"""Backbone, set aggregation, projector and prototype head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import storage
from .errors import ConfigError, NumericError, ShapeError, StorageError

CHECKPOINT_FORMAT = "setdino-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ViTConfig:
    image_size: int = 48  # global crop size; other sizes interpolate the position grid
    patch_size: int = 8
    in_channels: int = 4
    embed_dim: int = 96
    depth: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    n_prototypes: int = 1024
    projector_hidden_dim: int = 256
    bottleneck_dim: int = 64
    n_last_layers: int = 4

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError("model.image_size", "must be divisible by patch_size")
        if self.embed_dim % self.n_heads:
            raise ConfigError("model.embed_dim", "must be divisible by n_heads")
        for name in ("image_size", "patch_size", "embed_dim", "depth", "n_heads",
                     "n_prototypes", "projector_hidden_dim", "bottleneck_dim", "n_last_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}", "must be >= 1")

    @property
    def feature_dim(self) -> int:
        """Width of the concatenated last-layers class-token feature."""
        return min(self.n_last_layers, self.depth) * self.embed_dim


class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.scale = (dim // n_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.n_heads, C // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Block(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        self.grid = cfg.image_size // cfg.patch_size
        self.patch_embed = nn.Conv2d(cfg.in_channels, d, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + self.grid ** 2, d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(_init_weights)

    def _pos_embed(self, grid_h, grid_w):
        if grid_h == self.grid and grid_w == self.grid:
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        d = patch_pos.shape[-1]
        patch_pos = patch_pos.reshape(1, self.grid, self.grid, d).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(grid_h, grid_w), mode="bicubic",
                                  align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid_h * grid_w, d)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def _tokens(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected [B, {self.cfg.in_channels}, H, W], got {tuple(x.shape)}")
        p = self.cfg.patch_size
        if x.shape[-1] % p or x.shape[-2] % p:
            raise ShapeError(f"image size {tuple(x.shape[-2:])} not divisible by patch {p}")
        B = x.shape[0]
        t = self.patch_embed(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls_token.expand(B, -1, -1), t], dim=1)
        return t + self._pos_embed(x.shape[-2] // p, x.shape[-1] // p)

    def forward(self, x):
        """Normalized class token of the last block, ``[B, embed_dim]``."""
        if x.shape[0] == 0:
            return x.new_zeros((0, self.cfg.embed_dim))
        t = self._tokens(x)
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)[:, 0]

    def intermediate_class_tokens(self, x, n_last=None):
        n_last = n_last or self.cfg.n_last_layers
        n_last = min(n_last, len(self.blocks))
        if x.shape[0] == 0:
            return x.new_zeros((0, n_last * self.cfg.embed_dim))
        t = self._tokens(x)
        outs = []
        for i, blk in enumerate(self.blocks):
            t = blk(t)
            if i >= len(self.blocks) - n_last:
                outs.append(self.norm(t)[:, 0])
        return torch.cat(outs, dim=-1)


class ProjectionHead(nn.Module):
    """Three-layer MLP, L2 normalization, then a row-normalized prototype layer."""

    def __init__(self, in_dim, hidden_dim, bottleneck_dim, n_prototypes):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim), nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim), nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.mlp.apply(_init_weights)
        self.prototypes = nn.Parameter(torch.empty(n_prototypes, bottleneck_dim))
        nn.init.trunc_normal_(self.prototypes, std=0.02)

    def forward(self, x):
        z = F.normalize(self.mlp(x), dim=-1, eps=1e-12)
        w = F.normalize(self.prototypes, dim=-1, eps=1e-12)
        return z @ w.t()


class SetDinoNetwork(nn.Module):
    """Backbone plus projector; aggregation sits between the two."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = VisionTransformer(cfg)
        self.head = ProjectionHead(cfg.embed_dim, cfg.projector_hidden_dim, cfg.bottleneck_dim,
                                   cfg.n_prototypes)

    def set_logits(self, crops, set_size):
        """Logits per set for one crop index.

        ``crops`` is ``[P * set_size, C, h, w]`` ordered set-major; the
        backbone embeddings are averaged within each set before the head.
        """
        emb = self.backbone(crops)
        emb = aggregate(emb.reshape(-1, set_size, emb.shape[-1]), dim=1)
        return self.head(emb)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def build_network(cfg: ViTConfig, seed: int = 0, dtype=torch.float32) -> SetDinoNetwork:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(int(seed))
    try:
        net = SetDinoNetwork(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return net.to(dtype)


def encode(net, images):
    """Return ``(class_tokens [B, d], last-layers class tokens [B, k*d])`` in inference mode."""
    backbone = getattr(net, "backbone", net)
    x = torch.as_tensor(images, dtype=next(backbone.parameters()).dtype)
    if x.ndim != 4 or x.shape[1] != backbone.cfg.in_channels:
        raise ShapeError(f"expected [B, {backbone.cfg.in_channels}, H, W], got {tuple(x.shape)}")
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            per_layer = backbone.intermediate_class_tokens(x)
    finally:
        backbone.train(was_training)
    d = backbone.cfg.embed_dim
    return per_layer[:, -d:], per_layer


def aggregate(embeddings, dim: int = 0):
    """Arithmetic mean over the set axis."""
    if embeddings.shape[dim] == 0:
        raise ShapeError("cannot aggregate an empty set")
    if isinstance(embeddings, np.ndarray):
        return embeddings.mean(axis=dim)
    return embeddings.mean(dim=dim)


def project_and_sharpen(head, set_embedding, temperature: float, center=None):
    """Temperature softmax over prototype logits, optionally centered first."""
    if temperature <= 0:
        raise ConfigError("temperature", "must be > 0")
    logits = head(set_embedding)
    if center is not None:
        logits = logits - center
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite prototype logits")
    return torch.softmax(logits / temperature, dim=-1)


def parameter_count(module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, modules: dict, meta: dict, extra_tensors: dict | None = None) -> None:
    """Write named tensors of ``modules`` (prefix -> nn.Module) plus extras."""
    tensors = {}
    for prefix, mod in modules.items():
        for name, t in mod.state_dict().items():
            tensors[f"{prefix}.{name}"] = t.detach().cpu().numpy()
    for name, t in (extra_tensors or {}).items():
        tensors[name] = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **meta}
    storage.write_container(path, tensors, header)


def load_checkpoint(path):
    """Return ``(tensors, meta)``; ``meta['model']`` holds the ViTConfig fields."""
    tensors, meta = storage.read_container(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise StorageError(f"{path}: not a checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise StorageError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return tensors, meta


def load_network(path, which: str = "teacher") -> tuple[SetDinoNetwork, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = ViTConfig(**meta["model"])
    prefix = f"{which}."
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
    if not state:
        raise StorageError(f"{path}: no '{which}' tensors")
    dtype = next(iter(state.values())).dtype
    net = SetDinoNetwork(cfg).to(dtype)
    net.load_state_dict(state)
    net.eval()
    return net, meta


def config_dict(cfg: ViTConfig) -> dict:
    return asdict(cfg)


def output_entropy_bound(cfg: ViTConfig) -> float:
    return math.log(cfg.n_prototypes)
