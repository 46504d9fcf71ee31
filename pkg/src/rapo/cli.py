"""Command-line entry point.

Exit status: 0 on success, 1 on invalid input or usage, 2 on internal errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from rapo.answers import DEFAULT_ANSWER_PATTERN, reasoning_body
from rapo.batching import EmptyBatchError, ads_resample, filter_groups
from rapo.gradcheck import check_gradients
from rapo.imgseg import Dims, PlannerConfig, PlanRecord, plan, slice_layout
from rapo.records import (
    RecordError,
    open_output,
    read_records,
    rollout_from_record,
    save_policy,
    write_records,
)
from rapo.rewards import PenaltyConfig, composite_reward, final_correct
from rapo.sim import TrainConfig, compare_samplers, run_training
from rapo.trajectory import (
    DEFAULT_SEGMENT_LENGTH,
    InvalidGroupError,
    Prompt,
    RolloutGroup,
    RuleAnnotator,
    annotate,
)

log = logging.getLogger("rapo")

GRAD_TOLERANCE = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return cfg


def _require_input(args) -> str:
    if args.inp is None:
        raise UsageError("--in is required for this command")
    if args.inp != "-" and not Path(args.inp).is_file():
        raise UsageError(f"input file not found: {args.inp}")
    return args.inp


def _emit(args, records) -> None:
    if args.format == "records":
        write_records(args.out, records)
        return
    with open_output(args.out) as fh:
        for rec in records:
            fh.write(" ".join(f"{k}={json.dumps(v)}" for k, v in rec.items()) + "\n")


# -- reward ---------------------------------------------------------------

def _prompts_from_config(cfg: dict) -> dict[str, Prompt]:
    prompts = {}
    for pid, entry in cfg.get("prompts", {}).items():
        try:
            prompts[pid] = Prompt(id=pid, text=entry.get("text", ""),
                                  ground_truth=str(entry["ground_truth"]),
                                  task_kind=entry.get("task_kind", "thinking_math_science"),
                                  length_group=int(entry.get("length_group", 4096)))
        except (KeyError, ValueError, TypeError) as e:
            raise UsageError(f"prompt {pid!r} in config: {e}") from None
    return prompts


def _penalty_from_config(cfg: dict) -> PenaltyConfig:
    fields = dict(cfg.get("penalty", {}))
    if "enabled" in fields:
        fields["enabled"] = frozenset(fields["enabled"])
    try:
        return PenaltyConfig(**fields)
    except (TypeError, ValueError) as e:
        raise UsageError(f"penalty config: {e}") from None


def cmd_reward(args) -> int:
    cfg = _load_config(args.config)
    prompts = _prompts_from_config(cfg)
    penalty = _penalty_from_config(cfg)
    ann_cfg = cfg.get("annotator", {})
    annotator = RuleAnnotator(ann_cfg.get("answer_sentinel", "ANS:"),
                              ann_cfg.get("verify_sentinel", "VERIFY"))
    seg_len = int(cfg.get("segment_length", DEFAULT_SEGMENT_LENGTH))
    pattern = cfg.get("answer_pattern", DEFAULT_ANSWER_PATTERN)

    grouped: dict[str, list] = {}
    first_line: dict[str, int] = {}
    for lineno, rec in read_records(_require_input(args)):
        if not isinstance(rec, dict):
            raise RecordError(lineno, "record must be a JSON object")
        ro = rollout_from_record(rec, lineno)
        if ro.prompt_id not in prompts:
            raise RecordError(lineno, f"unknown prompt_id {ro.prompt_id!r}")
        grouped.setdefault(ro.prompt_id, []).append(ro)
        first_line.setdefault(ro.prompt_id, lineno)

    out = []
    for pid, rollouts in grouped.items():
        prompt = prompts[pid]
        correct = tuple(bool(final_correct(r.text, prompt.ground_truth, pattern))
                        for r in rollouts)
        try:
            group = RolloutGroup(prompt, tuple(rollouts), correct)
        except InvalidGroupError as e:
            raise RecordError(first_line[pid], f"prompt {pid!r}: {e}") from None
        traces = [annotate(reasoning_body(r.text), prompt.ground_truth, annotator, seg_len)
                  for r in rollouts]
        for i, (rb, trace, ok) in enumerate(zip(composite_reward(group, traces, penalty),
                                                traces, correct)):
            out.append({"prompt_id": pid, "index": i, "correct": int(ok),
                        "verify_count": trace.verify_count, **rb.to_record()})
    _emit(args, out)
    log.info("scored %d rollouts in %d groups", len(out), len(grouped))
    return 0


# -- ads ------------------------------------------------------------------

class _ReportGroup:
    """Per-prompt correctness flags, or a pass rate given directly by a manifest line."""

    def __init__(self, prompt_id: str):
        self.prompt_id = prompt_id
        self.correct: list[int] = []
        self.given_rate: float | None = None

    @property
    def pass_rate(self) -> float:
        if self.given_rate is not None:
            return self.given_rate
        return sum(self.correct) / len(self.correct)


def _add_report(groups: dict, lineno: int, rec) -> None:
    if not isinstance(rec, dict) or "prompt_id" not in rec:
        raise RecordError(lineno, "reward report needs a prompt_id")
    pid = str(rec["prompt_id"])
    if rec.get("duplicate_of") is not None:
        return  # replica line from an earlier manifest
    group = groups.setdefault(pid, _ReportGroup(pid))
    if "correct" in rec or "r_acc" in rec:
        ok = rec["correct"] if "correct" in rec else rec["r_acc"]
        if ok not in (0, 1, True, False):
            raise RecordError(lineno, f"correctness must be 0 or 1, got {ok!r}")
        if group.given_rate is not None:
            raise RecordError(lineno, f"prompt {pid!r} mixes pass_rate and per-rollout lines")
        group.correct.append(int(ok))
        return
    if "pass_rate" not in rec:
        raise RecordError(lineno, "reward report needs 'correct', 'r_acc' or 'pass_rate'")
    rate = rec["pass_rate"]
    if isinstance(rate, bool) or not isinstance(rate, (int, float)) or not 0 <= rate <= 1:
        raise RecordError(lineno, f"pass_rate must be a number in [0, 1], got {rate!r}")
    if group.correct or group.given_rate is not None:
        raise RecordError(lineno, f"duplicate pass_rate for prompt {pid!r}")
    group.given_rate = float(rate)


def cmd_ads(args) -> int:
    cfg = _load_config(args.config)
    mbs = int(cfg.get("mbs", 64))
    if mbs < 1:
        raise UsageError("mbs must be positive")
    groups: dict[str, _ReportGroup] = {}
    for lineno, rec in read_records(_require_input(args)):
        _add_report(groups, lineno, rec)

    kept, dropped = filter_groups(groups.values())
    try:
        batch = ads_resample(kept, mbs)
    except EmptyBatchError:
        log.warning("all %d prompt groups are saturated; manifest is empty", dropped)
        _emit(args, [])
        return 0
    manifest = [{"prompt_id": g.prompt_id, "pass_rate": g.pass_rate,
                 "duplicate_of": g.prompt_id if batch.is_duplicate(i) else None}
                for i, g in enumerate(batch.groups)]
    _emit(args, manifest)
    log.info("kept %d, dropped %d, duplicated %d (k=%d)",
             batch.n_original, dropped, batch.n_duplicates, batch.k)
    return 0


# -- plan-grid ------------------------------------------------------------

_PLAN_KEYS = ("W", "H", "W_v", "H_v", "tau")


def _plan_args(rec, lineno):
    if isinstance(rec, list):
        if len(rec) != 5:
            raise RecordError(lineno, "expected [W, H, W_v, H_v, tau]")
        values = rec
    elif isinstance(rec, dict):
        missing = [k for k in _PLAN_KEYS if k not in rec]
        if missing:
            raise RecordError(lineno, f"missing fields {missing}")
        values = [rec[k] for k in _PLAN_KEYS]
    else:
        raise RecordError(lineno, "expected an object or a 5-element array")
    W, H, Wv, Hv, tau = values
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in (W, H, Wv, Hv)):
        raise RecordError(lineno, "dimensions must be integers")
    try:
        return Dims(W, H), Dims(Wv, Hv), PlannerConfig(tau=float(tau))
    except (TypeError, ValueError) as e:
        raise RecordError(lineno, str(e)) from None


def cmd_plan_grid(args) -> int:
    cfg = _load_config(args.config)
    n_all = cfg.get("n_all")
    out = []
    for lineno, rec in read_records(_require_input(args)):
        image, encoder, pcfg = _plan_args(rec, lineno)
        if n_all is not None:
            pcfg = PlannerConfig(n_all=frozenset(n_all), tau=pcfg.tau)
        grid = plan(image, encoder, pcfg)
        out.append(PlanRecord(grid, slice_layout(grid, image, encoder)).to_record())
    _emit(args, out)
    return 0


# -- simulation -----------------------------------------------------------

def _train_config(args) -> TrainConfig:
    raw = _load_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.steps is not None:
        raw["steps"] = args.steps
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"train config: {e}") from None


def cmd_train_sim(args) -> int:
    cfg = _train_config(args)
    result = run_training(cfg)
    _emit(args, result.metrics)
    if args.checkpoint_dir:
        ckpt = Path(args.checkpoint_dir)
        ckpt.mkdir(parents=True, exist_ok=True)
        for step, logits in result.checkpoints:
            save_policy(ckpt / f"policy_step{step:05d}.txt", logits, step)
        save_policy(ckpt / "policy_final.txt", result.policy.logits, len(result.metrics))
    log.info("train-sim %s after %d steps", result.status, len(result.metrics))
    return 0


def cmd_compare_samplers(args) -> int:
    report = compare_samplers(_train_config(args))
    _emit(args, [{"arm": arm, **row} for arm, row in report.items()])
    return 0


def cmd_check_grad(args) -> int:
    seed = 0 if args.seed is None else args.seed
    errors = check_gradients(seed, trials=args.trials)
    worst = max(errors)
    ok = worst < GRAD_TOLERANCE
    _emit(args, [{"seed": seed, "trials": len(errors), "max_relative_error": worst,
                  "tolerance": GRAD_TOLERANCE, "passed": ok}])
    return 0 if ok else 1


COMMANDS = {
    "reward": cmd_reward,
    "ads": cmd_ads,
    "plan-grid": cmd_plan_grid,
    "train-sim": cmd_train_sim,
    "compare-samplers": cmd_compare_samplers,
    "check-grad": cmd_check_grad,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rapo", description="RAPO reward, batching, planning and simulation tools")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}",
                                parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--in", dest="inp")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--format", choices=("text", "records"), default="records")
        if name == "train-sim":
            p.add_argument("--checkpoint-dir")
        if name == "check-grad":
            p.add_argument("--trials", type=int, default=100)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("RAPO_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, RecordError) as e:
        log.error("%s", e)
        return 1
    except OSError as e:
        log.error("%s", e)
        return 1
    except Exception:
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
