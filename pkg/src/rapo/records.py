"""Line-delimited JSON records: trajectories, reward reports, manifests, checkpoints."""

from __future__ import annotations

import io
import json
import math
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from rapo.trajectory import Finish, Rollout

TRAJECTORY_FIELDS = ("prompt_id", "text", "tokens", "logprob_old", "entropy", "finish")
POLICY_HEADER = "# rapo-policy-table v1"


class RecordError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def read_records(path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)``; blank lines are skipped."""
    stream = sys.stdin if str(path) == "-" else open(path, encoding="utf-8")
    try:
        for lineno, line in enumerate(stream, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordError(lineno, f"invalid JSON ({e.msg})") from None
            yield lineno, rec
    finally:
        if stream is not sys.stdin:
            stream.close()


def dumps(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False, allow_nan=False)


@contextmanager
def open_output(path):
    if path is None or str(path) == "-":
        yield sys.stdout
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yield fh


def write_records(path, records: Iterable[dict]) -> int:
    n = 0
    with open_output(path) as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")
            n += 1
    return n


def rollout_to_record(r: Rollout) -> dict:
    return {
        "prompt_id": r.prompt_id,
        "text": r.text,
        "tokens": list(r.tokens),
        "logprob_old": list(r.logprob_old),
        "entropy": list(r.entropy),
        "finish": r.finish.value,
    }


def rollout_from_record(rec: dict, lineno: int = 0) -> Rollout:
    missing = [f for f in TRAJECTORY_FIELDS if f not in rec]
    if missing:
        raise RecordError(lineno, f"missing fields {missing}")
    try:
        tokens = tuple(int(t) for t in rec["tokens"])
        old = tuple(float(x) for x in rec["logprob_old"])
        ent = tuple(float(x) for x in rec["entropy"])
        if not all(math.isfinite(x) for x in old + ent):
            raise ValueError("non-finite value")
        return Rollout(str(rec["prompt_id"]), tokens, str(rec["text"]), old, old, ent,
                       Finish(rec["finish"]))
    except (TypeError, ValueError) as e:
        raise RecordError(lineno, str(e)) from None


def save_policy(path, logits: np.ndarray, step: int | None = None) -> None:
    S, V = logits.shape
    buf = io.StringIO()
    buf.write(f"{POLICY_HEADER} states={S} tokens={V}")
    if step is not None:
        buf.write(f" step={step}")
    buf.write("\n")
    for row in logits:
        buf.write(" ".join(repr(float(x)) for x in row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_policy(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(POLICY_HEADER):
        raise ValueError(f"{path}: not a policy table")
    fields = dict(kv.split("=") for kv in lines[0][len(POLICY_HEADER):].split())
    S, V = int(fields["states"]), int(fields["tokens"])
    table = np.array([[float(x) for x in ln.split()] for ln in lines[1:] if ln.strip()])
    if table.shape != (S, V):
        raise ValueError(f"{path}: expected {S}x{V} table, found {table.shape}")
    return table
