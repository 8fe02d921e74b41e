"""Text-guided joint vision encoding.

Image patches and question tokens (projected into the vision feature space)
share one transformer stack.  In the lower half of the stack vision queries
may not attend to text keys, so text starts to shape the visual features only
from the midpoint up.  Per-layer outputs are averaged into an early and a late
stage, concatenated along channels, and mapped into the language embedding
space.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import EncoderConfig
from .numerics import DTYPE, as_tensor, bilinear_resize, masked_attention


def gelu(x: torch.Tensor) -> torch.Tensor:
    return nn.functional.gelu(x, approximate="tanh")


class MLP(nn.Module):
    """Two-layer perceptron applied to the last axis."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, activation: str = "gelu"):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(d_hidden, d_out, dtype=DTYPE)
        if activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.fc1(x)
        if self.activation == "gelu":
            h = gelu(h)
        return self.fc2(h)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.out = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        *lead, t, d = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(*lead, t, 3, h, d // h)
        q, k, v = (qkv[..., i, :, :].transpose(-2, -3) for i in range(3))
        y = masked_attention(q, k, v, mask)  # [..., h, t, dh]
        y = y.transpose(-2, -3).reshape(*lead, t, d)
        return self.out(y)


class TransformerBlock(nn.Module):
    """Pre-norm residual attention + feed-forward block."""

    def __init__(self, dim: int, num_heads: int, ffn_mult: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ffn = MLP(dim, ffn_mult * dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.ffn(self.norm2(x))


class VisionEmbed(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        patch_dim = cfg.patch_size ** 2 * cfg.channels
        self.proj = nn.Linear(patch_dim, cfg.vision_dim, dtype=DTYPE)
        self.pos = nn.Parameter(torch.randn(cfg.num_patches, cfg.vision_dim, dtype=DTYPE) * 0.02)


class TuneEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = VisionEmbed(cfg)
        self.layers = nn.ModuleList(
            TransformerBlock(cfg.vision_dim, cfg.num_heads, cfg.ffn_mult) for _ in range(cfg.num_layers)
        )


@dataclass
class JointState:
    v_img: torch.Tensor
    v_txt: torch.Tensor
    layer_index: int


@dataclass
class FusedFeatures:
    v_f_img: torch.Tensor
    v_f_txt: torch.Tensor
    v_e_img: torch.Tensor
    v_l_img: torch.Tensor
    v_e_txt: torch.Tensor
    v_l_txt: torch.Tensor


def patchify(image: torch.Tensor, grid: int) -> torch.Tensor:
    """Split ``[..., H, W, C]`` into ``grid**2`` flattened patches, row-major."""
    *lead, H, W, C = image.shape
    if H % grid or W % grid:
        raise ValueError(f"image {H}x{W} not divisible into a {grid}x{grid} patch grid")
    ph, pw = H // grid, W // grid
    x = image.reshape(*lead, grid, ph, grid, pw, C)
    x = x.transpose(-4, -3)  # [..., gy, gx, ph, pw, C]
    return x.reshape(*lead, grid * grid, ph * pw * C)


def embed_image(image, cfg: EncoderConfig, model) -> torch.Tensor:
    """Patch-project an image (or a stack of images) into vision tokens."""
    image = as_tensor(image)
    if image.dim() == 2:
        image = image[..., None]
    H, W = image.shape[-3:-1]
    if H % cfg.patch_grid or W % cfg.patch_grid:
        raise ValueError(f"image {H}x{W} not divisible by patch grid {cfg.patch_grid}")
    if (H, W) != (cfg.image_size, cfg.image_size):
        raise ValueError(f"expected a {cfg.image_size}x{cfg.image_size} image, got {H}x{W}")
    emb = model.encoder.embed
    return emb.proj(patchify(image, cfg.patch_grid)) + emb.pos


def project_text_to_vision(e_txt: torch.Tensor, model) -> torch.Tensor:
    return model.mlp_t2v(e_txt)


def vision_text_mask(m: int, t: int, block_text: bool) -> torch.Tensor:
    """Attention mask over ``[vision; text]``; True means allowed."""
    mask = torch.ones(m + t, m + t, dtype=torch.bool)
    if block_text:
        mask[:m, m:] = False
    return mask


def encode_joint(v_img: torch.Tensor, v_txt: torch.Tensor, cfg: EncoderConfig, model) -> list[JointState]:
    """Run the joint stack; returns the N per-layer states (layer 0 excluded)."""
    m, t = v_img.shape[-2], v_txt.shape[-2]
    if v_txt.dim() < v_img.dim():
        v_txt = v_txt.expand(*v_img.shape[:-2], t, v_txt.shape[-1])
    x = torch.cat([v_img, v_txt], dim=-2)
    half = cfg.num_layers // 2
    lower = vision_text_mask(m, t, block_text=True)
    upper = vision_text_mask(m, t, block_text=False)
    states = []
    for i, layer in enumerate(model.encoder.layers, start=1):
        x = layer(x, lower if i <= half else upper)
        states.append(JointState(x[..., :m, :], x[..., m:, :], i))
    return states


def aggregate_stages(states: list[JointState]) -> FusedFeatures:
    n = len(states)
    if n == 0 or n % 2:
        raise ValueError(f"need an even, non-zero number of layer states, got {n}")
    half = n // 2

    def mean(xs):
        return torch.stack(xs).mean(dim=0)

    v_e_img = mean([s.v_img for s in states[:half]])
    v_l_img = mean([s.v_img for s in states[half:]])
    v_e_txt = mean([s.v_txt for s in states[:half]])
    v_l_txt = mean([s.v_txt for s in states[half:]])
    return FusedFeatures(
        v_f_img=torch.cat([v_e_img, v_l_img], dim=-1),
        v_f_txt=torch.cat([v_e_txt, v_l_txt], dim=-1),
        v_e_img=v_e_img, v_l_img=v_l_img, v_e_txt=v_e_txt, v_l_txt=v_l_txt,
    )


def map_vision_to_text(v_f: torch.Tensor, model) -> torch.Tensor:
    expected = model.mlp_v2t.fc1.in_features
    if v_f.shape[-1] != expected:
        raise ValueError(f"expected {expected} channels, got {v_f.shape[-1]}")
    return model.mlp_v2t(v_f)


def split_quadrants(image: torch.Tensor) -> torch.Tensor:
    """``[H, W, C]`` -> ``[4, H/2, W/2, C]`` ordered (0,0), (0,1), (1,0), (1,1)."""
    H, W = image.shape[:2]
    if H % 2 or W % 2:
        raise ValueError(f"image {H}x{W} does not split into equal quadrants")
    h, w = H // 2, W // 2
    return torch.stack([image[:h, :w], image[:h, w:], image[h:, :w], image[h:, w:]])


def assemble_quadrants(tiles: torch.Tensor) -> torch.Tensor:
    """Inverse layout of :func:`split_quadrants` for ``[4, p, p, D]`` token grids."""
    top = torch.cat([tiles[0], tiles[1]], dim=1)
    bottom = torch.cat([tiles[2], tiles[3]], dim=1)
    return torch.cat([top, bottom], dim=0)


def encode_auxiliary(image, cfg: EncoderConfig, model, n: int, w: int) -> torch.Tensor:
    """Text-free auxiliary grid ``[(n*w), (n*w), D_t]`` from the four quadrants.

    Each quadrant is resized up to the encoder input resolution, encoded with
    no text, mapped into the language space, and the four token grids are
    placed back in their spatial arrangement before the final resize.
    """
    image = as_tensor(image)
    if image.dim() == 2:
        image = image[..., None]
    quads = split_quadrants(image)
    S = cfg.image_size
    quads = torch.stack([bilinear_resize(q, S, S) for q in quads])
    v_img = embed_image(quads, cfg, model)
    v_txt = v_img.new_zeros(4, 0, cfg.vision_dim)
    fused = aggregate_stages(encode_joint(v_img, v_txt, cfg, model))
    e = map_vision_to_text(fused.v_f_img, model)
    p = cfg.patch_grid
    grid = assemble_quadrants(e.reshape(4, p, p, -1))
    side = n * w
    return bilinear_resize(grid, side, side)
