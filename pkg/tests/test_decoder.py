import math

import numpy as np
import pytest
import torch

from oracles import attention_loop, bilinear_grid
from fusion_vlm.config import DEFAULT_LATENT_COUNTS, ConfigError, DecoderConfig, EncoderConfig
from fusion_vlm.data import ToySample, gen_toy_dataset
from fusion_vlm.decoder import (
    DialogueSequence, Group, all_patches, causal_mask, decode_forward, embed_sequence, form_queries,
    init_latents, interpolate_vision_tokens, patch, refresh_latents, sample_latent_count,
)
from fusion_vlm.model import FusionModel, encode_sample, forward_sample
from fusion_vlm.numerics import as_tensor, finite_diff_grad, relative_error

D = 32


@pytest.fixture(scope="module")
def model():
    return FusionModel(seed=0)


@pytest.fixture(scope="module")
def sample():
    ds = gen_toy_dataset(0, 16)
    return next(s for s in ds if len(s.turns) >= 2)


def rand(*shape, seed=0):
    return as_tensor(np.random.default_rng(seed).normal(size=shape))


def layer(model, i=2):
    return model.decoder.interactions[str(i)]


# -- config ---------------------------------------------------------------------------

def test_config_defaults():
    cfg = DecoderConfig()
    assert cfg.window == 3
    assert cfg.latent_counts == (4, 16, 64, 144, 256)
    assert cfg.interaction_layers == (2, 4)
    assert DecoderConfig(num_layers=6).interaction_layers == (3, 6)
    with pytest.raises(ConfigError):
        DecoderConfig(latent_counts=(4, 8))
    with pytest.raises(ConfigError):
        DecoderConfig(interaction_layers=(5,))


# -- latents and windows -----------------------------------------------------------------

def test_init_latents_constant_and_identity():
    const = torch.full((6, 6, 4), -1.25, dtype=torch.float64)
    assert bool((init_latents(const, 2) == -1.25).all())
    aux = rand(3, 3, 4)
    assert torch.equal(init_latents(aux, 3), aux)  # w = 1


def test_init_latents_matches_reference():
    aux = rand(6, 6, 3, seed=1)
    got = init_latents(aux, 2).numpy()
    assert np.abs(got - bilinear_grid(aux.numpy(), 2, 2)).max() < 1e-12


def test_patch_single_token_and_index_oracle():
    aux = rand(6, 6, 5, seed=2)
    assert torch.equal(patch(aux[:2, :2], 1, 0, 1), aux[1, 0][None])
    p = patch(aux, 1, 0, 3)
    expected = [aux[r, c] for r in range(3, 6) for c in range(0, 3)]
    assert torch.equal(p, torch.stack(expected))
    with pytest.raises(IndexError):
        patch(aux, 2, 0, 3)


@pytest.mark.parametrize("n,w", [(1, 1), (2, 3), (3, 2), (4, 3)])
def test_patches_partition_aux(n, w):
    aux = torch.arange(n * w * n * w * 2, dtype=torch.float64).reshape(n * w, n * w, 2)
    pieces = torch.cat([patch(aux, i, j, w) for i in range(n) for j in range(n)])
    assert sorted(pieces[:, 0].tolist()) == sorted(aux[..., 0].reshape(-1).tolist())
    assert len(set(pieces[:, 0].tolist())) == aux[..., 0].numel()
    batched = all_patches(aux, w)
    for i in range(n):
        for j in range(n):
            assert torch.equal(batched[i, j], patch(aux, i, j, w))


# -- queries -----------------------------------------------------------------------------

def test_zero_query_mlp_gives_zero(model):
    lay = layer(model)
    saved = {k: v.clone() for k, v in lay.query_mlp.state_dict().items()}
    with torch.no_grad():
        for p in lay.query_mlp.parameters():
            p.zero_()
    try:
        q = form_queries(rand(1, D), rand(2, 2, D, seed=3), lay)
        assert torch.equal(q, torch.zeros(2, 2, D, dtype=torch.float64))
    finally:
        lay.query_mlp.load_state_dict(saved)


def test_queries_are_per_cell(model):
    lat = rand(2, 2, D, seed=4)
    lat[1, 1] = lat[0, 0]
    q = form_queries(rand(1, D, seed=5), lat, layer(model))
    assert q.shape == (2, 2, D)
    assert torch.equal(q[0, 0], q[1, 1])
    assert not torch.equal(q[0, 0], q[0, 1])


def test_query_mlp_gradcheck(model):
    lay = layer(model)
    h, lat = rand(1, D, seed=6), rand(2, 2, D, seed=7)
    w = lay.query_mlp.fc1.weight
    w.grad = None
    (form_queries(h, lat, lay) ** 2).sum().backward()

    def f(v):
        with torch.no_grad():
            old = w.data.clone()
            w.data.copy_(v)
            out = float((form_queries(h, lat, lay) ** 2).sum())
            w.data.copy_(old)
        return out

    idx = torch.randperm(w.numel(), generator=torch.Generator().manual_seed(0))[:40]
    num = finite_diff_grad(f, w.detach()).reshape(-1)[idx]
    assert relative_error(w.grad.reshape(-1)[idx], num, 1e-6) < 1e-4
    w.grad = None


# -- refresh ---------------------------------------------------------------------------

def test_refresh_uniform_logits_gives_value_of_mean(model):
    lay = layer(model)
    saved = lay.w_k.weight.detach().clone()
    with torch.no_grad():
        lay.w_k.weight.zero_()
    try:
        aux = rand(6, 6, D, seed=8)
        out = refresh_latents(rand(2, 2, D, seed=9), aux, lay, 3)
        for i in range(2):
            for j in range(2):
                expected = lay.w_v(patch(aux, i, j, 3).mean(0))
                assert torch.allclose(out[i, j], expected, atol=1e-14, rtol=0)
    finally:
        with torch.no_grad():
            lay.w_k.weight.copy_(saved)


def test_window_equals_dense_loop_oracle(model):
    lay = layer(model)
    side = 5
    aux = rand(side, side, D, seed=10)
    query = rand(1, 1, D, seed=11)
    got = refresh_latents(query, aux, lay, side)[0, 0].detach().numpy()
    wq, wk, wv = (m.weight.detach().numpy() for m in (lay.w_q, lay.w_k, lay.w_v))
    toks = aux.numpy().reshape(-1, D)
    q = [[sum(wq[r, c] * query.numpy()[0, 0, c] for c in range(D)) for r in range(D)]]
    k = [[sum(wk[r, c] * t[c] for c in range(D)) for r in range(D)] for t in toks]
    v = [[sum(wv[r, c] * t[c] for c in range(D)) for r in range(D)] for t in toks]
    assert np.abs(got - attention_loop(q, k, v)[0]).max() < 1e-12


def test_identical_cells_refresh_identically(model):
    aux = rand(6, 6, D, seed=12)
    aux[3:, 3:] = aux[:3, :3]
    q = rand(2, 2, D, seed=13)
    q[1, 1] = q[0, 0]
    out = refresh_latents(q, aux, layer(model), 3)
    assert torch.equal(out[0, 0], out[1, 1])


# -- sequences -------------------------------------------------------------------------

def test_sequence_layout():
    seq = DialogueSequence(torch.zeros(4, D, dtype=torch.float64),
                           [Group([5, 6, 7], [8, 2]), Group([9], [10, 11, 2])], latent_count=4)
    assert seq.latent_slots == [range(4, 8), range(13, 17)]
    assert seq.question_spans == [range(8, 11), range(17, 18)]
    assert seq.end_of_question == [10, 17]
    assert seq.answer_spans == [range(11, 13), range(18, 21)]
    assert seq.length == 21 and seq.grid_side == 2
    targets, mask = seq.targets()
    assert mask.nonzero().reshape(-1).tolist() == [10, 11, 17, 18, 19]
    assert targets[mask].tolist() == [8, 2, 10, 11, 2]
    with pytest.raises(ValueError):
        DialogueSequence(torch.zeros(1, D), [Group([1], [2])], latent_count=5)


def _plain_decoder(model, seq, latents):
    h = embed_sequence(seq, model, latents)
    mask = causal_mask(seq.length)
    for blk in model.decoder.layers:
        h = blk(h, mask)
    return model.decoder.lm_head(model.decoder.final_norm(h))


def _sequence(model, sample, count, seed=0):
    enc = encode_sample(sample, model)
    n = math.isqrt(count)
    aux = rand(3 * n, 3 * n, D, seed=seed)
    seq = DialogueSequence(rand(16, D, seed=seed + 1), enc.groups, count)
    return seq, aux, [init_latents(aux, n)] * len(enc.groups)


def test_card_off_equals_plain_decoder(model, sample):
    seq, aux, lat = _sequence(model, sample, 4)
    off = decode_forward(seq, model.dec_cfg, model, lat, aux, interaction_layers=())
    assert torch.equal(off, _plain_decoder(model, seq, lat))
    on = decode_forward(seq, model.dec_cfg, model, lat, aux)
    assert not torch.equal(on, off)


def test_interaction_index_out_of_range(model, sample):
    seq, aux, lat = _sequence(model, sample, 4)
    with pytest.raises(ValueError):
        decode_forward(seq, model.dec_cfg, model, lat, aux, interaction_layers=(7,))


def _perturbed(seq, span_pos, new_id):
    groups = [Group(list(g.question), list(g.answer)) for g in seq.groups]
    for g, qs, ans in zip(groups, seq.question_spans, seq.answer_spans):
        if span_pos in qs:
            g.question[span_pos - qs.start] = new_id
        if span_pos in ans:
            g.answer[span_pos - ans.start] = new_id
    return DialogueSequence(seq.global_vision, groups, seq.latent_count)


def test_answer_perturbation_leaves_refreshed_latents(model, sample):
    seq, aux, lat = _sequence(model, sample, 4)
    pos = seq.answer_spans[0].start
    other = _perturbed(seq, pos, (seq.token_ids()[pos].item() + 7) % 60 + 4)
    _, ta = decode_forward(seq, model.dec_cfg, model, lat, aux, return_trace=True)
    _, tb = decode_forward(other, model.dec_cfg, model, lat, aux, return_trace=True)
    for i in ta.refreshed:
        assert torch.equal(ta.refreshed[i][0], tb.refreshed[i][0])


@pytest.mark.parametrize("card", [False, True])
def test_causal_integrity_for_answer_tokens(model, sample, card):
    seq, aux, lat = _sequence(model, sample, 4)
    layers = None if card else ()
    base = decode_forward(seq, model.dec_cfg, model, lat, aux, interaction_layers=layers)
    for ans in seq.answer_spans:
        r = ans.start + len(ans) // 2
        other = _perturbed(seq, r, (seq.token_ids()[r].item() + 3) % 60 + 4)
        got = decode_forward(other, model.dec_cfg, model, lat, aux, interaction_layers=layers)
        assert torch.equal(got[:r], base[:r])
        assert not torch.equal(got[r:], base[r:])


def test_causal_integrity_card_off_any_token(model, sample):
    seq, aux, lat = _sequence(model, sample, 4)
    base = decode_forward(seq, model.dec_cfg, model, lat, aux, interaction_layers=())
    for r in [seq.question_spans[0].start, seq.end_of_question[-1]]:
        other = _perturbed(seq, r, (seq.token_ids()[r].item() + 5) % 60 + 4)
        got = decode_forward(other, model.dec_cfg, model, lat, aux, interaction_layers=())
        assert torch.equal(got[:r], base[:r])


def test_question_change_reaches_only_its_latents_backwards(model, sample):
    # with interactions on, a question token rewrites its own group's latents,
    # which sit earlier in the sequence; everything before that group is untouched
    seq, aux, lat = _sequence(model, sample, 4)
    g = len(seq.groups) - 1
    r = seq.end_of_question[g]
    base = decode_forward(seq, model.dec_cfg, model, lat, aux)
    other = _perturbed(seq, r, (seq.token_ids()[r].item() + 5) % 60 + 4)
    got = decode_forward(other, model.dec_cfg, model, lat, aux)
    start = seq.latent_slots[g].start
    assert torch.equal(got[:start], base[:start])
    assert not torch.equal(got[start:r], base[start:r])


@pytest.mark.parametrize("count", DEFAULT_LATENT_COUNTS)
def test_latent_count_sweep_deterministic(sample, count):
    outs = []
    for _ in range(2):
        m = FusionModel(seed=0)
        res = forward_sample(m, encode_sample(sample, m), count)
        outs.append(res)
    a, b = outs
    assert a.sequence.grid_side == math.isqrt(count)
    assert a.tensors["aux"].shape == (3 * math.isqrt(count),) * 2 + (D,)
    assert a.logits.shape == (a.sequence.length, m.dec_cfg.vocab_size)
    assert torch.equal(a.logits, b.logits)
    assert torch.isfinite(a.logits).all()


# -- latent count sampling --------------------------------------------------------------

def test_sample_latent_count():
    rng = np.random.default_rng(0)
    assert {sample_latent_count(rng, (64,)) for _ in range(20)} == {64}
    r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
    assert [sample_latent_count(r1) for _ in range(50)] == [sample_latent_count(r2) for _ in range(50)]
    assert sample_latent_count(np.random.default_rng(5)) in DEFAULT_LATENT_COUNTS
    with pytest.raises(ValueError):
        sample_latent_count(rng, ())


def test_sample_latent_count_uniform():
    rng = np.random.default_rng(123)
    n = 100_000
    draws = [sample_latent_count(rng) for _ in range(n)]
    sigma = math.sqrt(0.2 * 0.8 / n)
    for c in DEFAULT_LATENT_COUNTS:
        assert abs(draws.count(c) / n - 0.2) < 3 * sigma


# -- global token interpolation -----------------------------------------------------------

def test_interpolate_identity_and_constant():
    g = rand(4, 4, 3, seed=14)
    assert torch.equal(interpolate_vision_tokens(g, 16), g)
    const = torch.full((4, 4, 3), 2.5, dtype=torch.float64)
    for t in (1, 4, 9, 36):
        assert bool((interpolate_vision_tokens(const, t) == 2.5).all())
    with pytest.raises(ValueError):
        interpolate_vision_tokens(g, 10)


def test_interpolate_6x6_to_4x4_reference():
    g = rand(6, 6, 3, seed=15)
    got = interpolate_vision_tokens(g, 16).numpy()
    assert np.abs(got - bilinear_grid(g.numpy(), 4, 4)).max() < 1e-12


def test_reduced_global_tokens_for_constant_image(model):
    sample = ToySample(np.full((16, 16, 3), 0.4), [("what color is it?", "red")])
    enc = encode_sample(sample, model)
    full = forward_sample(model, enc, 4)
    reduced = forward_sample(model, enc, 4, global_tokens=4)
    e_img = full.tensors["e_img"]
    # a constant image gives position-dependent tokens only through the learned
    # positional table, so compare the reduction with the interpolation oracle
    expected = bilinear_grid(e_img.detach().numpy().reshape(4, 4, -1), 2, 2).reshape(4, -1)
    assert reduced.sequence.global_vision.shape == (4, D)
    assert np.abs(reduced.sequence.global_vision.detach().numpy() - expected).max() < 1e-12
