"""Command-line entry point.

Exit codes: 0 success, 1 verification or training failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import torch

from .checkpoint import load_model, load_tensors, save_model
from .config import STAGE_NAMES, ConfigError, RunConfig
from .data import gen_toy_dataset, load_dialogues
from .filtering import (
    FilterThresholds, HashedScorer, filter_caption, image_generation_score, qa_final_score,
)
from .images import load_image
from .model import FusionModel, encode_sample, forward_sample
from .training import (
    NonFiniteLossError, default_gradcheck, make_optimizer, train_stage, write_jsonl,
)

log = logging.getLogger("fusion_vlm")

STAGE_FLAGS = {"1": "stage1", "1.5": "stage1_5", "2": "stage2"}
LOSS_KEYS = ("step", "l_ce", "l_v2t", "l_t2v", "l_total")


class UsageError(Exception):
    pass


def _load_config(path) -> RunConfig:
    if path is not None and not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return RunConfig.load(path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def build_thresholds(base: dict | None = None, overrides: dict | None = None) -> FilterThresholds:
    th = FilterThresholds()
    merged = {**(base or {}), **{k: v for k, v in (overrides or {}).items() if v is not None}}
    typed = {k: type(getattr(th, k))(v) for k, v in merged.items()}
    return th.replace(**typed)


# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    if args.corrupt:
        cfg.gradcheck.corrupt_group = args.corrupt
    reports = default_gradcheck(cfg)
    passed = all(r.passed for r in reports.values())
    out = {"passed": passed, "by_latent_count": {str(c): r.to_dict() for c, r in reports.items()}}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0 if passed else 1


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        try:
            _, meta = load_tensors(args.resume)
            cfg = RunConfig.from_dict(meta["config"])
        except OSError as exc:
            raise UsageError(f"cannot read checkpoint: {exc}") from exc
        except (KeyError, ConfigError) as exc:
            raise UsageError(f"checkpoint has no usable config: {exc}") from exc
        model = FusionModel(cfg.encoder, cfg.decoder, seed=cfg.seed)
        optimizer = make_optimizer(model, cfg.train)
        load_model(args.resume, model, optimizer)
        stage_name, start, total = meta["stage"], int(meta["step"]), int(meta["total_steps"])
    else:
        cfg = _load_config(args.config)
        model = FusionModel(cfg.encoder, cfg.decoder, seed=cfg.seed)
        optimizer = make_optimizer(model, cfg.train)
        stage_name = STAGE_FLAGS[args.stage]
        start = 0
        total = cfg.stages[stage_name].steps if args.steps is None else args.steps
        if total < 0:
            raise UsageError("--steps must be non-negative")
    stage = cfg.stages[stage_name]
    dataset = gen_toy_dataset(cfg.seed, cfg.train.dataset_size, stage.template_mix, cfg.encoder.image_size)
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if args.resume else "w"
    with open(metrics_path, mode, encoding="utf-8") as fh:
        try:
            state, optimizer = train_stage(model, dataset, stage, total, cfg, optimizer, start_step=start,
                                           stop_step=args.stop_after, on_record=lambda r: write_jsonl(fh, r))
            step = state.step
        except NonFiniteLossError as exc:
            print(f"training aborted: {exc}", file=sys.stderr)
            return 1
    meta = {"config": cfg.to_dict(), "stage": stage_name, "step": step, "total_steps": total}
    save_model(out_dir / "checkpoint.fvt", model, optimizer, meta)
    summary = {"stage": stage_name, "step": step, "total_steps": total,
               "metrics": str(metrics_path), "checkpoint": str(out_dir / "checkpoint.fvt")}
    if state.history:
        summary["final"] = {k: state.history[-1][k] for k in LOSS_KEYS}
    print(json.dumps(summary, sort_keys=True))
    return 0


@torch.no_grad()
def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    count = args.latent_count
    n = int(round(count ** 0.5)) if count and count > 0 else 0
    if n * n != count:
        raise UsageError(f"latent count {count} is not a perfect square")
    if args.global_tokens is not None:
        g = int(round(args.global_tokens ** 0.5))
        if args.global_tokens < 1 or g * g != args.global_tokens:
            raise UsageError(f"global token count {args.global_tokens} is not a perfect square")
    model = FusionModel(cfg.encoder, cfg.decoder, seed=cfg.seed)
    if args.checkpoint:
        load_model(args.checkpoint, model)
    model.eval()
    try:
        samples = load_dialogues(args.dialogues, cfg.encoder.image_size)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    layers = () if args.interaction == "off" else None
    global_tokens = args.global_tokens if args.global_tokens is not None else cfg.global_tokens
    tok = model.tokenizer
    for s in samples:
        enc = encode_sample(s, model)
        res = forward_sample(model, enc, count, global_tokens=global_tokens, interaction_layers=layers,
                             return_trace=True)
        seq = res.sequence
        for t, ans in enumerate(seq.answer_spans):
            pred = res.logits[ans.start - 1:ans.stop - 1].argmax(-1).tolist()
            norms = {str(layer): float(lat[t].norm(dim=-1).mean())
                     for layer, lat in res.trace.refreshed.items()}
            print(json.dumps({
                "id": s.sample_id, "turn": t, "latent_count": count, "grid_side": seq.grid_side,
                "global_tokens": int(seq.global_vision.shape[0]),
                "argmax_tokens": pred, "argmax_text": tok.decode(pred),
                "answer_logit_sum": float(res.logits[ans.start - 1:ans.stop - 1].sum()),
                "latent_refresh_norms": norms,
            }, sort_keys=True))
    return 0


def _read_records(path):
    fh = sys.stdin if path == "-" else open(path, encoding="utf-8")
    try:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield lineno, line
    finally:
        if fh is not sys.stdin:
            fh.close()


def cmd_filter(args) -> int:
    cfg = _load_config(args.config)
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(FilterThresholds)}
    try:
        th = build_thresholds(cfg.thresholds, overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    scorer = HashedScorer()
    counts: Counter = Counter()
    base = Path(args.records).parent if args.records != "-" else Path(".")
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for lineno, line in _read_records(args.records):
            rec_id = lineno
            try:
                rec = json.loads(line)
                rec_id = rec.get("id", lineno)
                text = rec["text"]
                if not isinstance(text, str) or not text:
                    raise ValueError("'text' must be a non-empty string")
                image = None
                if rec.get("image_path"):
                    p = Path(rec["image_path"])
                    image = load_image(p if p.is_absolute() else base / p)
                result = filter_caption(text, image, th, scorer=scorer,
                                        itm_score=rec.get("itm_score"), clip_score=rec.get("clip_score"))
                row = result.to_record(rec_id)
                if rec.get("qa") and image is not None:
                    row["metrics"]["qa_final_score"] = qa_final_score(rec["qa"], image, scorer)
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                row = {"id": rec_id, "decision": "error", "reasons": [], "metrics": {},
                       "error": f"{type(exc).__name__}: {exc}"}
                counts["error"] += 1
            else:
                counts[row["decision"]] += 1
                for r in row["reasons"]:
                    counts[r] += 1
            write_jsonl(out, row)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1
    finally:
        if out is not sys.stdout:
            out.close()
    print(f"{'outcome':<24}{'count':>8}", file=sys.stderr)
    for key in ("keep", "reject", "error") + tuple(k for k in sorted(counts) if k not in ("keep", "reject", "error")):
        print(f"{key:<24}{counts.get(key, 0):>8}", file=sys.stderr)
    return 0


def cmd_score_image(args) -> int:
    try:
        image = load_image(args.image)
        score = image_generation_score(image, args.crop_size, HashedScorer(), args.description,
                                       clip_score=args.clip_score)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps(score.to_dict(), sort_keys=True))
    return 0


def cmd_score_qa(args) -> int:
    try:
        image = load_image(args.image)
        score = qa_final_score(args.statement, image, HashedScorer())
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps({"final_score": score, "statements": len(args.statement)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusion-vlm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    g.add_argument("--config")
    g.add_argument("--corrupt", metavar="GROUP", help="flip the gradient sign of GROUP (negative control)")
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="run one training stage on generated toy data")
    t.add_argument("--config")
    t.add_argument("--stage", choices=sorted(STAGE_FLAGS), default="1")
    t.add_argument("--steps", type=int, help="total steps (schedule length); default from config")
    t.add_argument("--stop-after", type=int, help="stop early at this step, keeping the schedule")
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--out", default="runs/train")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="run the full model over a dialogue file")
    s.add_argument("--config")
    s.add_argument("--dialogues", required=True)
    s.add_argument("--latent-count", type=int, default=16)
    s.add_argument("--global-tokens", type=int)
    s.add_argument("--interaction", choices=("on", "off"), default="on")
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("filter", help="filter caption records (JSON lines)")
    f.add_argument("records", help="input JSONL, or - for stdin")
    f.add_argument("--config")
    f.add_argument("--output", "-o")
    for fld in dataclasses.fields(FilterThresholds):
        f.add_argument("--" + fld.name.replace("_", "-"), dest=fld.name, type=type(fld.default))
    f.set_defaults(func=cmd_filter)

    si = sub.add_parser("score-image", help="SSIM-based generated image score")
    si.add_argument("--image", required=True)
    si.add_argument("--crop-size", type=int, required=True)
    si.add_argument("--description", default="")
    si.add_argument("--clip-score", type=float)
    si.set_defaults(func=cmd_score_image)

    sq = sub.add_parser("score-qa", help="mean similarity of declarative QA statements")
    sq.add_argument("--image", required=True)
    sq.add_argument("--statement", action="append", required=True)
    sq.set_defaults(func=cmd_score_qa)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
