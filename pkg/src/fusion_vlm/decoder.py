"""Context-aware recursive alignment decoding.

A small causal decoder whose input is the global vision tokens followed by
one group per question: ``n*n`` latent tokens, the question tokens, and the
answer tokens.  After selected decoder layers an interaction step takes the
hidden state at the last question token, fuses it with every latent cell,
and refreshes that cell by attending over its own ``w x w`` window of the
auxiliary grid.  The refreshed latents overwrite the latent slots before the
next layer runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import DecoderConfig
from .encoder import MLP, TransformerBlock
from .numerics import DTYPE, bilinear_resize, softmax


class InteractionLayer(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.query_mlp = MLP(2 * dim, dim, dim)
        self.w_q = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.w_k = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.w_v = nn.Linear(dim, dim, bias=False, dtype=DTYPE)


class CardDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.model_dim, dtype=DTYPE)
        self.layers = nn.ModuleList(
            TransformerBlock(cfg.model_dim, cfg.num_heads, cfg.ffn_mult) for _ in range(cfg.num_layers)
        )
        self.interactions = nn.ModuleDict(
            {str(i): InteractionLayer(cfg.model_dim) for i in cfg.interaction_layers}
        )
        self.final_norm = nn.LayerNorm(cfg.model_dim, dtype=DTYPE)
        self.lm_head = nn.Linear(cfg.model_dim, cfg.vocab_size, dtype=DTYPE)


@dataclass
class Group:
    question: list[int]
    answer: list[int]


@dataclass
class DialogueSequence:
    """Token layout of one multi-turn sample.

    ``global_vision`` is a ``[g, D]`` matrix.  Each group contributes
    ``latent_count`` latent slots, then its question ids, then answer ids.
    """
    global_vision: torch.Tensor
    groups: list[Group]
    latent_count: int
    # filled by __post_init__
    latent_slots: list[range] = field(init=False)
    question_spans: list[range] = field(init=False)
    answer_spans: list[range] = field(init=False)
    end_of_question: list[int] = field(init=False)
    length: int = field(init=False)

    def __post_init__(self):
        if math.isqrt(self.latent_count) ** 2 != self.latent_count:
            raise ValueError(f"latent count {self.latent_count} is not a perfect square")
        pos = self.global_vision.shape[0]
        self.latent_slots, self.question_spans, self.answer_spans, self.end_of_question = [], [], [], []
        for g in self.groups:
            if not g.question:
                raise ValueError("every group needs at least one question token")
            self.latent_slots.append(range(pos, pos + self.latent_count))
            pos += self.latent_count
            self.question_spans.append(range(pos, pos + len(g.question)))
            pos += len(g.question)
            self.end_of_question.append(pos - 1)
            self.answer_spans.append(range(pos, pos + len(g.answer)))
            pos += len(g.answer)
        self.length = pos

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.latent_count)

    def token_ids(self) -> torch.Tensor:
        """Ids per position; -1 where the position carries no text token."""
        ids = torch.full((self.length,), -1, dtype=torch.long)
        for g, qs, ans in zip(self.groups, self.question_spans, self.answer_spans):
            ids[qs.start:qs.stop] = torch.tensor(g.question)
            if g.answer:
                ids[ans.start:ans.stop] = torch.tensor(g.answer)
        return ids

    def targets(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Next-token targets and the mask of positions supervised by cross-entropy.

        Position ``k`` is supervised iff token ``k + 1`` is an answer token.
        """
        ids = self.token_ids()
        targets = torch.zeros(self.length, dtype=torch.long)
        mask = torch.zeros(self.length, dtype=torch.bool)
        for ans in self.answer_spans:
            for pos in ans:
                targets[pos - 1] = ids[pos]
                mask[pos - 1] = True
        return targets, mask


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    i = torch.arange(0, dim, 2, dtype=DTYPE)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe


def init_latents(aux: torch.Tensor, n: int) -> torch.Tensor:
    return bilinear_resize(aux, n, n)


def patch(aux: torch.Tensor, i: int, j: int, w: int) -> torch.Tensor:
    """The ``(i, j)`` window of the auxiliary grid, flattened to ``[w*w, D]``."""
    n = aux.shape[0] // w
    if aux.shape[0] != n * w or aux.shape[1] != n * w:
        raise ValueError(f"aux extent {tuple(aux.shape[:2])} is not a multiple of window {w}")
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"patch index ({i}, {j}) outside the {n}x{n} grid")
    return aux[i * w:(i + 1) * w, j * w:(j + 1) * w].reshape(w * w, -1)


def all_patches(aux: torch.Tensor, w: int) -> torch.Tensor:
    """Every window at once: ``[n, n, w*w, D]``."""
    side, _, d = aux.shape
    n = side // w
    if side != n * w or aux.shape[1] != side:
        raise ValueError(f"aux extent {tuple(aux.shape[:2])} is not a square multiple of window {w}")
    return aux.reshape(n, w, n, w, d).transpose(1, 2).reshape(n, n, w * w, d)


def form_queries(h_p: torch.Tensor, latents: torch.Tensor, layer: InteractionLayer) -> torch.Tensor:
    """Fuse the end-of-question state with every latent cell.

    ``h_p`` is ``[..., 1, D]`` (or ``[..., D]``) and ``latents`` ``[..., n, n, D]``.
    """
    if h_p.dim() == latents.dim() - 2:
        h_p = h_p[..., None, :]
    n = latents.shape[-2]
    h = h_p[..., None, :].expand(*latents.shape[:-3], n, n, h_p.shape[-1])
    return layer.query_mlp(torch.cat([h, latents], dim=-1))


def refresh_latents(queries: torch.Tensor, aux: torch.Tensor, layer: InteractionLayer, w: int) -> torch.Tensor:
    """Windowed attention of each cell's query over its own aux window."""
    d = queries.shape[-1]
    win = all_patches(aux, w)
    n = win.shape[0]
    if queries.shape[-3:-1] != (n, n):
        raise ValueError(f"queries grid {tuple(queries.shape[-3:-1])} does not match aux windows ({n}, {n})")
    q = layer.w_q(queries)  # [..., n, n, D]
    k = layer.w_k(win)  # [n, n, w*w, D]
    v = layer.w_v(win)
    logits = (q[..., None, :] * k).sum(-1) / math.sqrt(d)  # [..., n, n, w*w]
    attn = softmax(logits, -1)
    return (attn[..., None] * v).sum(-2)


@dataclass
class DecodeTrace:
    hidden: list[torch.Tensor] = field(default_factory=list)
    refreshed: dict[int, torch.Tensor] = field(default_factory=dict)


def causal_mask(length: int) -> torch.Tensor:
    return torch.ones(length, length, dtype=torch.bool).tril()


def embed_sequence(seq: DialogueSequence, model, latents_per_group) -> torch.Tensor:
    dec = model.decoder
    ids = seq.token_ids()
    text = dec.tok_embed(ids.clamp(min=0))
    parts = [seq.global_vision]
    for g, (slots, qs, ans) in enumerate(zip(seq.latent_slots, seq.question_spans, seq.answer_spans)):
        parts.append(latents_per_group[g].reshape(len(slots), -1))
        parts.append(text[qs.start:ans.stop])
    h = torch.cat(parts, dim=0)
    return h + sinusoidal_positions(seq.length, h.shape[-1])


def decode_forward(
    seq: DialogueSequence,
    cfg: DecoderConfig,
    model,
    latents_per_group,
    aux: torch.Tensor | None,
    interaction_layers=None,
    return_trace: bool = False,
):
    """Causal decoding with interaction steps; returns ``[len, vocab]`` logits.

    ``interaction_layers`` overrides ``cfg.interaction_layers`` (pass ``()``
    to disable the interaction steps entirely).
    """
    dec = model.decoder
    layers_on = cfg.interaction_layers if interaction_layers is None else tuple(interaction_layers)
    for i in layers_on:
        if not 1 <= i <= cfg.num_layers:
            raise ValueError(f"interaction layer {i} outside 1..{cfg.num_layers}")
        if str(i) not in dec.interactions:
            raise ValueError(f"model has no interaction weights for layer {i}")
    if layers_on and aux is None:
        raise ValueError("interaction steps need the auxiliary grid")
    trace = DecodeTrace()
    h = embed_sequence(seq, model, latents_per_group)
    mask = causal_mask(seq.length)
    latents = torch.stack([torch.as_tensor(l).reshape(seq.grid_side, seq.grid_side, -1)
                           for l in latents_per_group]) if seq.groups else None
    slot_index = torch.tensor([p for s in seq.latent_slots for p in s], dtype=torch.long)
    eoq = torch.tensor(seq.end_of_question, dtype=torch.long)
    for i, layer in enumerate(dec.layers, start=1):
        h = layer(h, mask)
        if i in layers_on and seq.groups:
            # the whole sequence is in the processed prefix, so every group refreshes
            h_p = h[eoq]  # [G, D]
            queries = form_queries(h_p, latents, dec.interactions[str(i)])
            latents = refresh_latents(queries, aux, dec.interactions[str(i)], cfg.window)
            h = h.index_put((slot_index,), latents.reshape(-1, h.shape[-1]))
            trace.refreshed[i] = latents
        if return_trace:
            trace.hidden.append(h)
    logits = dec.lm_head(dec.final_norm(h))
    if return_trace:
        return logits, trace
    return logits


def sample_latent_count(rng: np.random.Generator, counts=(4, 16, 64, 144, 256)) -> int:
    counts = tuple(counts)
    if not counts:
        raise ValueError("latent count set is empty")
    return int(counts[rng.integers(len(counts))])


def interpolate_vision_tokens(grid: torch.Tensor, target_count: int) -> torch.Tensor:
    """Resize a ``[g, g, D]`` vision token grid to ``target_count`` tokens."""
    side = math.isqrt(target_count)
    if target_count < 1 or side * side != target_count:
        raise ValueError(f"target count {target_count} is not a perfect square")
    return bilinear_resize(grid, side, side)
