"""Three-stage toy training and the gradient-verification runner."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

from .config import DEFAULT_LAMBDA, STAGE_NAMES, RunConfig, StageConfig, TrainConfig
from .data import ToySample, gen_toy_dataset
from .decoder import sample_latent_count
from .losses import LossBundle, loss_total
from .model import EncodedSample, FusionModel, encode_sample, first_nonfinite, forward_sample
from .numerics import relative_error

logger = logging.getLogger(__name__)

GRADCHECK_FLOOR = 1e-5


class NonFiniteLossError(FloatingPointError):
    pass


def cosine_lr(step: int, total_steps: int, peak: float) -> float:
    """Cosine decay from ``peak`` at step 0 to 0 at step ``total_steps - 1``."""
    if total_steps <= 1:
        return peak
    return 0.5 * peak * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


def make_optimizer(model: FusionModel, tcfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=0.0, betas=(tcfg.beta1, tcfg.beta2), eps=tcfg.adam_eps,
        weight_decay=tcfg.weight_decay, foreach=False,
    )


def step_rng(seed: int, stage: str, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STAGE_NAMES.index(stage), int(step)])


def batch_loss(model: FusionModel, batch: list[EncodedSample], latent_count: int,
               lam: float = DEFAULT_LAMBDA, global_tokens: int | None = None) -> LossBundle:
    parts = []
    for enc in batch:
        res = forward_sample(model, enc, latent_count, global_tokens=global_tokens, lam=lam)
        bad = first_nonfinite(res.tensors)
        if bad is not None:
            raise NonFiniteLossError(f"non-finite values in {bad!r} (sample {enc.sample_id})")
        parts.append(res.losses)
    k = len(parts)
    mean = lambda attr: sum(getattr(b, attr) for b in parts) / k  # noqa: E731
    return loss_total(mean("l_ce"), mean("l_v2t"), mean("l_t2v"), lam)


def train_step(model: FusionModel, batch: list[EncodedSample], stage: StageConfig,
               optimizer: torch.optim.Optimizer, lr: float, latent_count: int,
               tcfg: TrainConfig | None = None) -> LossBundle:
    """One forward/backward/update; returns the (detached) loss bundle."""
    tcfg = tcfg or TrainConfig()
    if not batch:
        raise ValueError("empty batch")
    model.train()
    optimizer.zero_grad(set_to_none=False)
    bundle = batch_loss(model, batch, latent_count, tcfg.loss_lambda)
    if not math.isfinite(float(bundle.l_total.detach())):
        raise NonFiniteLossError("total loss is not finite")
    bundle.l_total.backward()
    if tcfg.clip_norm and tcfg.clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.clip_norm)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return LossBundle(*(t.detach() for t in (bundle.l_v2t, bundle.l_t2v, bundle.l_ce, bundle.l_total)),
                      lam=bundle.lam)


@dataclass
class TrainState:
    stage: str
    step: int
    total_steps: int
    history: list[dict] = field(default_factory=list)


def train_stage(
    model: FusionModel,
    dataset: list[ToySample],
    stage: StageConfig,
    total_steps: int,
    cfg: RunConfig,
    optimizer: torch.optim.Optimizer | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> tuple[TrainState, torch.optim.Optimizer]:
    """Run ``stage`` from ``start_step`` up to ``stop_step`` (default: the end).

    Batch indices and latent counts are drawn from a generator keyed by
    ``(seed, stage, step)``, so a resumed run replays the same schedule.
    """
    optimizer = optimizer or make_optimizer(model, cfg.train)
    encoded = [encode_sample(s, model) for s in dataset]
    stop = total_steps if stop_step is None else min(stop_step, total_steps)
    state = TrainState(stage.name, start_step, total_steps)
    for step in range(start_step, stop):
        rng = step_rng(cfg.seed, stage.name, step)
        k = min(stage.batch_size, len(encoded))
        idx = rng.choice(len(encoded), size=k, replace=False)
        count = sample_latent_count(rng, model.dec_cfg.latent_counts)
        lr = cosine_lr(step, total_steps, stage.peak_lr)
        bundle = train_step(model, [encoded[i] for i in idx], stage, optimizer, lr, count, cfg.train)
        rec = bundle.as_record(step)
        rec.update(stage=stage.name, lr=lr, latent_count=count)
        state.history.append(rec)
        state.step = step + 1
        if on_record is not None:
            on_record(rec)
    return state, optimizer


@torch.no_grad()
def evaluate_ce(model: FusionModel, dataset: Iterable[ToySample], latent_count: int = 4) -> float:
    model.eval()
    vals = [float(forward_sample(model, encode_sample(s, model), latent_count).losses.l_ce)
            for s in dataset]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tolerance: float
    checked: dict[str, int]

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def failing(self) -> list[str]:
        return [g for g, e in self.errors.items() if not e < self.tolerance]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance,
                "max_relative_error": self.errors, "entries_checked": self.checked,
                "failing_groups": self.failing}


def gradcheck_groups(
    loss_fn: Callable[[], torch.Tensor],
    groups: dict[str, list[tuple[str, torch.nn.Parameter]]],
    eps: float = 1e-5,
    subsample: int = 6,
    seed: int = 0,
    tolerance: float = 1e-4,
    corrupt_group: str | None = None,
) -> GradcheckReport:
    """Compare autograd gradients with central differences on sampled entries.

    ``corrupt_group`` installs a sign-flipping gradient hook on that group's
    parameters; it exists only as a negative control.
    """
    params = [p for plist in groups.values() for _, p in plist]
    for p in params:
        p.grad = None
    hooks = []
    if corrupt_group is not None:
        if corrupt_group not in groups:
            raise KeyError(f"unknown parameter group {corrupt_group!r}")
        hooks = [p.register_hook(lambda g: -g) for _, p in groups[corrupt_group]]
    try:
        loss = loss_fn()
        loss.backward()
    finally:
        for h in hooks:
            h.remove()

    rng = np.random.default_rng(seed)
    errors, checked = {}, {}
    for gname, plist in groups.items():
        if not plist:
            continue
        sizes = np.array([p.numel() for _, p in plist])
        total = int(sizes.sum())
        picks = rng.choice(total, size=min(subsample, total), replace=False)
        analytic, numeric = [], []
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        for flat in sorted(int(x) for x in picks):
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            _, p = plist[pi]
            j = flat - offsets[pi]
            g = p.grad.reshape(-1)[j].item() if p.grad is not None else 0.0
            view = p.data.reshape(-1)
            orig = view[j].item()
            with torch.no_grad():
                view[j] = orig + eps
                fp = float(loss_fn())
                view[j] = orig - eps
                fm = float(loss_fn())
                view[j] = orig
            analytic.append(g)
            numeric.append((fp - fm) / (2 * eps))
        errors[gname] = relative_error(analytic, numeric, GRADCHECK_FLOOR)
        checked[gname] = len(analytic)
    for p in params:
        p.grad = None
    return GradcheckReport(errors, tolerance, checked)


def run_gradcheck(
    model: FusionModel,
    sample: ToySample,
    eps: float = 1e-5,
    subsample: int = 6,
    latent_count: int = 4,
    seed: int = 0,
    tolerance: float = 1e-4,
    corrupt_group: str | None = None,
    lam: float = DEFAULT_LAMBDA,
) -> GradcheckReport:
    enc = encode_sample(sample, model)

    def loss_fn():
        return forward_sample(model, enc, latent_count, lam=lam).losses.l_total

    return gradcheck_groups(loss_fn, model.param_groups(), eps, subsample, seed, tolerance, corrupt_group)


def gradcheck_sample(cfg: RunConfig) -> ToySample:
    """First multi-turn toy sample for the seed, so every interaction path is exercised."""
    ds = gen_toy_dataset(cfg.seed, 16, size=cfg.encoder.image_size)
    return next((s for s in ds if len(s.turns) >= 2), ds[0])


def default_gradcheck(cfg: RunConfig) -> dict[int, GradcheckReport]:
    """Gradient check of the default toy model at each configured latent count."""
    model = FusionModel(cfg.encoder, cfg.decoder, seed=cfg.seed)
    sample = gradcheck_sample(cfg)
    g = cfg.gradcheck
    return {c: run_gradcheck(model, sample, g.eps, g.subsample, c, cfg.seed, g.tolerance,
                             g.corrupt_group, cfg.train.loss_lambda)
            for c in g.latent_counts}


def write_jsonl(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()
