"""The full vision-language model and its single-sample forward pass."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .config import DEFAULT_LAMBDA, DecoderConfig, EncoderConfig
from .data import EOS, SEP, ByteTokenizer, ToySample
from .decoder import (
    CardDecoder, DialogueSequence, Group, decode_forward, init_latents, interpolate_vision_tokens,
)
from .encoder import (
    MLP, TuneEncoder, aggregate_stages, embed_image, encode_auxiliary, encode_joint,
    map_vision_to_text, project_text_to_vision,
)
from .losses import LossBundle, loss_ce, loss_t2v, loss_total, loss_v2t
from .numerics import as_tensor

PARAM_GROUPS = (
    "vision_embed", "encoder_layers", "mlp_t2v", "mlp_v2t", "token_embed",
    "decoder_layers", "lm_head", "interaction_query_mlp", "interaction_qkv",
)


class FusionModel(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig | None = None, dec_cfg: DecoderConfig | None = None,
                 seed: int = 0):
        super().__init__()
        self.enc_cfg = enc_cfg or EncoderConfig()
        self.dec_cfg = dec_cfg or DecoderConfig(model_dim=self.enc_cfg.text_dim)
        if self.dec_cfg.model_dim != self.enc_cfg.text_dim:
            raise ValueError("decoder width must equal the encoder's text width")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            d_v, d_t = self.enc_cfg.vision_dim, self.enc_cfg.text_dim
            self.encoder = TuneEncoder(self.enc_cfg)
            self.mlp_t2v = MLP(d_t, d_t, d_v)
            self.mlp_v2t = MLP(2 * d_v, d_t, d_t)
            self.decoder = CardDecoder(self.dec_cfg)
        self.tokenizer = ByteTokenizer(self.dec_cfg.vocab_size)

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            groups[_group_of(name)].append((name, p))
        return groups


def _group_of(name: str) -> str:
    if name.startswith("encoder.embed"):
        return "vision_embed"
    if name.startswith("encoder.layers"):
        return "encoder_layers"
    if name.startswith("mlp_t2v"):
        return "mlp_t2v"
    if name.startswith("mlp_v2t"):
        return "mlp_v2t"
    if name.startswith("decoder.tok_embed"):
        return "token_embed"
    if name.startswith("decoder.layers"):
        return "decoder_layers"
    if name.startswith(("decoder.final_norm", "decoder.lm_head")):
        return "lm_head"
    if name.startswith("decoder.interactions"):
        return "interaction_query_mlp" if ".query_mlp." in name else "interaction_qkv"
    raise KeyError(name)


@dataclass
class EncodedSample:
    image: torch.Tensor
    text_ids: list[int]
    groups: list[Group]
    sample_id: str = ""


def encode_sample(sample: ToySample, model: FusionModel) -> EncodedSample:
    """Tokenise a dialogue: encoder text and per-turn question/answer ids.

    The encoder sees every question of the dialogue, joined by SEP and cut to
    ``max_text_len`` tokens.  Answers end with EOS.
    """
    tok = model.tokenizer
    text: list[int] = []
    groups = []
    for q, a in sample.turns:
        q_ids = tok.encode(q)
        if text:
            text.append(SEP)
        text.extend(q_ids)
        groups.append(Group(question=q_ids, answer=tok.encode(a) + [EOS]))
    text = text[: model.enc_cfg.max_text_len]
    return EncodedSample(as_tensor(sample.image), text, groups, sample.sample_id)


@dataclass
class ForwardResult:
    logits: torch.Tensor
    losses: LossBundle
    sequence: DialogueSequence
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    trace: object = None


def forward_sample(
    model: FusionModel,
    enc: EncodedSample,
    latent_count: int,
    global_tokens: int | None = None,
    interaction_layers=None,
    lam: float = DEFAULT_LAMBDA,
    return_trace: bool = False,
) -> ForwardResult:
    ecfg, dcfg = model.enc_cfg, model.dec_cfg
    n = math.isqrt(latent_count)
    if n * n != latent_count:
        raise ValueError(f"latent count {latent_count} is not a perfect square")

    v_img = embed_image(enc.image, ecfg, model)
    ids = torch.tensor(enc.text_ids, dtype=torch.long)
    e_txt = model.decoder.tok_embed(ids)
    v_txt = project_text_to_vision(e_txt, model)
    fused = aggregate_stages(encode_joint(v_img, v_txt, ecfg, model))
    e_img = map_vision_to_text(fused.v_f_img, model)

    p = ecfg.patch_grid
    global_vision = e_img
    if global_tokens is not None and global_tokens != p * p:
        global_vision = interpolate_vision_tokens(e_img.reshape(p, p, -1), global_tokens).reshape(
            global_tokens, -1)

    aux = encode_auxiliary(enc.image, ecfg, model, n, dcfg.window)
    latents = init_latents(aux, n)
    seq = DialogueSequence(global_vision, enc.groups, latent_count)
    out = decode_forward(seq, dcfg, model, [latents] * len(enc.groups), aux,
                         interaction_layers=interaction_layers, return_trace=return_trace)
    logits, trace = out if return_trace else (out, None)

    targets, mask = seq.targets()
    l_ce = loss_ce(logits, targets, mask)
    l_v2t = loss_v2t(e_txt, fused.v_f_txt, model.mlp_v2t)
    l_t2v = loss_t2v(e_img, v_img, model.mlp_t2v)
    bundle = loss_total(l_ce, l_v2t, l_t2v, lam)
    tensors = {
        "v_img": v_img, "e_txt": e_txt, "v_txt": v_txt, "v_f_img": fused.v_f_img,
        "v_f_txt": fused.v_f_txt, "e_img": e_img, "aux": aux, "latents": latents,
        "logits": logits, "l_ce": l_ce, "l_v2t": l_v2t, "l_t2v": l_t2v,
    }
    return ForwardResult(logits, bundle, seq, tensors, trace)


def first_nonfinite(tensors: dict[str, torch.Tensor]) -> str | None:
    for name, t in tensors.items():
        if not bool(torch.isfinite(t).all()):
            return name
    return None
