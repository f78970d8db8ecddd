"""Minimal ViT-S/8 with access to per-layer key tokens.

The network mirrors the DINO/timm ViT-Small layout (module names included),
so a standard pretrained state dict loads directly. Implementing the blocks
here rather than wrapping a library model is what makes the key projections
of individual attention layers reachable: shallow-layer keys describe the
whole crop, deeper-layer keys localize patches, and both are consumed
downstream as frozen features.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

from .errors import ModelLoadError

IMAGE_SIZE = 224
PATCH = 8
EMBED = 384
HEADS = 6
DEPTH = 12
GRID = IMAGE_SIZE // PATCH  # 28


class Attention(nn.Module):
    def __init__(self, dim=EMBED, heads=HEADS):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads)
        qkv = qkv.permute(2, 0, 3, 1, 4)  # 3, b, heads, n, head_dim
        q, k, v = qkv[0], qkv[1], qkv[2]
        # keys per token with heads re-concatenated: (b, n, c)
        self.last_keys = k.permute(0, 2, 1, 3).reshape(b, n, c)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim=EMBED, hidden=EMBED * 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self):
        super().__init__()
        self.norm1 = nn.LayerNorm(EMBED, eps=1e-6)
        self.attn = Attention()
        self.norm2 = nn.LayerNorm(EMBED, eps=1e-6)
        self.mlp = Mlp()

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self):
        super().__init__()
        self.proj = nn.Conv2d(3, EMBED, kernel_size=PATCH, stride=PATCH)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)  # (b, n, c)


class ViTSmall8(nn.Module):
    def __init__(self):
        super().__init__()
        self.patch_embed = PatchEmbed()
        self.cls_token = nn.Parameter(torch.zeros(1, 1, EMBED))
        self.pos_embed = nn.Parameter(torch.zeros(1, GRID * GRID + 1, EMBED))
        self.blocks = nn.ModuleList([Block() for _ in range(DEPTH)])
        self.norm = nn.LayerNorm(EMBED, eps=1e-6)

    def forward(self, x):
        b = x.shape[0]
        tokens = self.patch_embed(x)
        cls = self.cls_token.expand(b, -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    @torch.no_grad()
    def patch_keys(self, x, layers):
        """Key tokens of the patch positions at the requested block indices.

        Returns {layer: (b, 28, 28, 384)} with the CLS key dropped.
        """
        self.forward(x)
        out = {}
        for layer in layers:
            keys = self.blocks[layer].attn.last_keys  # (b, n+1, c)
            out[layer] = keys[:, 1:, :].reshape(x.shape[0], GRID, GRID, EMBED)
        return out


def load_model(weights: str | None = None, random_init_seed: int | None = None) -> ViTSmall8:
    """Pretrained weights from a local state-dict file, or a seeded random
    initialization for offline testing (recorded in output metadata)."""
    if weights is None and random_init_seed is None:
        raise ModelLoadError(
            "no weights given: pass a state-dict path or an explicit "
            "random-init seed for testing")
    if weights is not None and random_init_seed is not None:
        raise ModelLoadError("weights and random-init are mutually exclusive")

    model = ViTSmall8()
    if weights is not None:
        path = Path(weights)
        if not path.exists():
            raise ModelLoadError(f"weights file not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as e:
            raise ModelLoadError(f"cannot read state dict {path}: {e}") from e
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        try:
            missing, unexpected = model.load_state_dict(state, strict=False)
        except RuntimeError as e:
            raise ModelLoadError(f"state dict does not fit ViT-S/8: {e}") from e
        if missing:
            raise ModelLoadError(f"state dict is missing parameters: {missing[:4]} ...")
    else:
        gen = torch.Generator().manual_seed(int(random_init_seed))
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
    model.eval()
    return model
