"""Verifiable reward: run the task's tests against a patched workspace.

Reward is binary and earned only by passing every regression and focused
test. An empty patch short-circuits to 0 without touching a sandbox. Model
failures (bad patch, failing tests, timeouts) become reward-0 records;
infrastructure failures (workspace missing, setup commands broken) become
EvaluationFailure entries so they are never confused with a genuine
negative label.
"""
from __future__ import annotations

import hashlib
import logging
import shutil
import subprocess
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import SandboxProvisionError
from .jsonl import read_records, write_records
from .rollout import Trajectory
from .tasks import (
    ProgramError,
    SYNTH_FOCUSED_TEST,
    SYNTH_REGRESSION_TEST,
    SynthTask,
    Task,
    apply_candidate,
    run_program,
)

log = logging.getLogger(__name__)

REWARDS_SCHEMA = "rewards"
STACKTRACE_TAIL_CHARS = 4000

STATUS_PASS = "pass"
STATUS_FAIL = "fail"
STATUS_ERROR = "error"


@dataclass(frozen=True)
class RewardRecord:
    task_id: str
    trajectory_ref: str
    reward: int  # 0 or 1
    per_test: dict[str, str]
    empty_patch: bool
    stacktrace: str | None
    wall_time_s: float

    def __post_init__(self):
        if self.reward not in (0, 1):
            raise ValueError(f"reward must be 0 or 1, got {self.reward}")
        if self.empty_patch and self.reward != 0:
            raise ValueError("empty patch cannot earn reward")


@dataclass(frozen=True)
class EvaluationFailure:
    """Infrastructure-level failure; carries no reward signal at all."""

    task_id: str
    trajectory_ref: str
    error: str


def _tail(text: str, limit: int = STACKTRACE_TAIL_CHARS) -> str:
    return text if len(text) <= limit else text[-limit:]


# ---------------------------------------------------------------------------
# Synthetic (in-memory) isolation
# ---------------------------------------------------------------------------


def _evaluate_synthetic(task: SynthTask, trajectory: Trajectory) -> tuple[int, dict, str | None]:
    per_test = {SYNTH_REGRESSION_TEST: STATUS_ERROR, SYNTH_FOCUSED_TEST: STATUS_ERROR}
    patch = trajectory.patch
    if patch is None or patch.synth is None:
        return 0, per_test, "patch is not a (line, candidate) selection"
    line, cand = patch.synth
    if not (0 <= line < task.n_lines and 0 <= cand < task.n_candidates):
        return 0, per_test, f"patch indices ({line}, {cand}) outside the task grid"
    replacement = task.candidates[line][cand]
    try:
        actual = run_program(apply_candidate(task.lines, line, replacement))
    except ProgramError as exc:
        return 0, per_test, _tail(str(exc))
    per_test[SYNTH_REGRESSION_TEST] = STATUS_PASS
    if actual == task.expected_output:
        per_test[SYNTH_FOCUSED_TEST] = STATUS_PASS
        return 1, per_test, None
    per_test[SYNTH_FOCUSED_TEST] = STATUS_FAIL
    stack = (
        f"{SYNTH_FOCUSED_TEST} failed: expected {task.expected_output} got {actual}\n"
        f"patched statement {line}: {replacement}"
    )
    return 0, per_test, _tail(stack)


# ---------------------------------------------------------------------------
# Subprocess and container isolation
# ---------------------------------------------------------------------------


def _apply_edits(root: Path, edits: Sequence[tuple[str, str]]) -> None:
    """Apply (path:start:end, replacement) edits; raises ValueError on bad ones.

    Ranges are zero-based half-open against the file as previous edits left
    it; edits touching the same file should come ordered bottom-up.
    """
    for location, replacement in edits:
        rel, start_s, end_s = location.rsplit(":", 2)
        start, end = int(start_s), int(end_s)
        if rel.startswith("/") or ".." in Path(rel).parts:
            raise ValueError(f"edit path escapes the workspace: {rel}")
        target = root / rel
        if not target.is_file():
            raise ValueError(f"edit targets a missing file: {rel}")
        lines = target.read_text(encoding="utf-8").splitlines()
        if not (0 <= start <= end <= len(lines)):
            raise ValueError(f"edit range {start}:{end} invalid for {rel} ({len(lines)} lines)")
        lines[start:end] = replacement.splitlines()
        target.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_test_lines(output: str, suite: Sequence[str]) -> dict[str, str]:
    """Strict line protocol: each suite test reports 'PASS|FAIL|ERROR <id>'.

    Tests the command never reported count as errors; unknown test ids in
    the output are ignored.
    """
    reported: dict[str, str] = {}
    for line in output.splitlines():
        parts = line.strip().split()
        if len(parts) == 2 and parts[0] in ("PASS", "FAIL", "ERROR"):
            reported[parts[1]] = parts[0].lower()
    return {tid: reported.get(tid, STATUS_ERROR) for tid in suite}


def build_container_argv(
    image: str, workspace: Path, command: str, runtime: str = "docker"
) -> list[str]:
    """OCI runtime invocation: isolated netns, workspace mounted at /workspace."""
    return [
        runtime,
        "run",
        "--rm",
        "--network=none",
        "-v",
        f"{workspace}:/workspace",
        "-w",
        "/workspace",
        image,
        "sh",
        "-c",
        command,
    ]


def _evaluate_sandboxed(
    task: Task, trajectory: Trajectory, container_image: str | None
) -> tuple[int, dict, str | None]:
    suite = task.tests.all_tests
    per_test_error = {tid: STATUS_ERROR for tid in suite}
    src = Path(task.workspace)
    if not src.is_dir():
        raise SandboxProvisionError(f"{task.id}: workspace {task.workspace!r} is not a directory")

    with tempfile.TemporaryDirectory(prefix="rlvr-sandbox-") as tmp:
        root = Path(tmp) / "workspace"
        try:
            shutil.copytree(src, root)
        except OSError as exc:
            raise SandboxProvisionError(f"{task.id}: workspace copy failed: {exc}") from exc

        try:
            _apply_edits(root, trajectory.patch.edits)
        except (ValueError, OSError) as exc:
            return 0, per_test_error, _tail(f"patch application failed: {exc}")

        for cmd in task.env_spec.setup_commands:
            try:
                proc = subprocess.run(
                    cmd, shell=True, cwd=root, capture_output=True, text=True,
                    timeout=task.env_spec.timeout_s,
                )
            except subprocess.TimeoutExpired as exc:
                raise SandboxProvisionError(f"{task.id}: setup command {cmd!r} timed out") from exc
            if proc.returncode != 0:
                raise SandboxProvisionError(
                    f"{task.id}: setup command {cmd!r} exited {proc.returncode}: "
                    f"{_tail(proc.stdout + proc.stderr, 500)}"
                )

        if task.env_spec.isolation == "container":
            if not container_image:
                raise SandboxProvisionError(f"{task.id}: container isolation needs an image ref")
            argv = build_container_argv(container_image, root, task.env_spec.test_command)
            run_kwargs = dict(capture_output=True, text=True, timeout=task.env_spec.timeout_s)
            runner = lambda: subprocess.run(argv, **run_kwargs)  # noqa: E731
        else:
            runner = lambda: subprocess.run(  # noqa: E731
                task.env_spec.test_command, shell=True, cwd=root,
                capture_output=True, text=True, timeout=task.env_spec.timeout_s,
            )

        try:
            proc = runner()
        except subprocess.TimeoutExpired as exc:
            partial = (exc.stdout or b"", exc.stderr or b"")
            text = "".join(p.decode("utf-8", "replace") if isinstance(p, bytes) else p for p in partial)
            return 0, per_test_error, _tail(f"test command timed out after {task.env_spec.timeout_s}s\n{text}")

        combined = proc.stdout + proc.stderr
        per_test = _parse_test_lines(proc.stdout, suite)
        reward = int(all(status == STATUS_PASS for status in per_test.values()))
        stack = None if reward == 1 else _tail(combined)
        return reward, per_test, stack


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def evaluate(task: Task, trajectory: Trajectory, *, container_image: str | None = None) -> RewardRecord:
    """Score one trajectory. Raises SandboxProvisionError on infra failures."""
    if trajectory.task_id != task.id:
        raise ValueError(f"trajectory {trajectory.traj_id} does not belong to task {task.id}")
    started = time.perf_counter()

    if trajectory.patch is None:
        return RewardRecord(
            task_id=task.id,
            trajectory_ref=trajectory.traj_id,
            reward=0,
            per_test={},
            empty_patch=True,
            stacktrace=None,
            wall_time_s=time.perf_counter() - started,
        )

    if isinstance(task, SynthTask):
        reward, per_test, stack = _evaluate_synthetic(task, trajectory)
        elapsed = time.perf_counter() - started
        if elapsed > task.env_spec.timeout_s:
            reward = 0
            per_test = {tid: STATUS_ERROR for tid in task.tests.all_tests}
            stack = f"evaluation exceeded {task.env_spec.timeout_s}s budget"
    else:
        reward, per_test, stack = _evaluate_sandboxed(task, trajectory, container_image)
        elapsed = time.perf_counter() - started

    return RewardRecord(
        task_id=task.id,
        trajectory_ref=trajectory.traj_id,
        reward=reward,
        per_test=per_test,
        empty_patch=False,
        stacktrace=stack,
        wall_time_s=elapsed,
    )


def evaluate_batch(
    items: Sequence[tuple[Task, Trajectory]],
    *,
    workers: int = 4,
    container_image: str | None = None,
) -> list[RewardRecord | EvaluationFailure]:
    """Evaluate many attempts; output order matches input order.

    Individual infrastructure failures become EvaluationFailure entries and
    never abort the rest of the batch.
    """

    def one(item: tuple[Task, Trajectory]) -> RewardRecord | EvaluationFailure:
        task, traj = item
        try:
            return evaluate(task, traj, container_image=container_image)
        except SandboxProvisionError as exc:
            return EvaluationFailure(task_id=task.id, trajectory_ref=traj.traj_id, error=str(exc))
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("unexpected evaluator failure for %s", traj.traj_id)
            return EvaluationFailure(task_id=task.id, trajectory_ref=traj.traj_id, error=repr(exc))

    workers = max(1, workers)
    if workers == 1 or len(items) <= 1:
        return [one(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, items))


def workspace_fingerprint(path: str | Path) -> str:
    """Content hash of a directory tree; used to prove evaluation is read-only."""
    root = Path(path)
    digest = hashlib.sha256()
    for file in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(file.relative_to(root)).encode("utf-8"))
        digest.update(b"\0")
        digest.update(file.read_bytes())
        digest.update(b"\0")
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def reward_to_record(rec: RewardRecord | EvaluationFailure) -> dict:
    if isinstance(rec, EvaluationFailure):
        return {
            "task_id": rec.task_id,
            "trajectory_ref": rec.trajectory_ref,
            "infrastructure_error": rec.error,
        }
    return {
        "task_id": rec.task_id,
        "trajectory_ref": rec.trajectory_ref,
        "reward": rec.reward,
        "per_test": rec.per_test,
        "empty_patch": rec.empty_patch,
        "stacktrace": rec.stacktrace,
        "wall_time_s": rec.wall_time_s,
    }


def reward_from_record(rec: dict) -> RewardRecord | EvaluationFailure:
    if "infrastructure_error" in rec:
        return EvaluationFailure(
            task_id=rec["task_id"],
            trajectory_ref=rec["trajectory_ref"],
            error=rec["infrastructure_error"],
        )
    return RewardRecord(
        task_id=rec["task_id"],
        trajectory_ref=rec["trajectory_ref"],
        reward=int(rec["reward"]),
        per_test=dict(rec["per_test"]),
        empty_patch=bool(rec["empty_patch"]),
        stacktrace=rec.get("stacktrace"),
        wall_time_s=float(rec.get("wall_time_s", 0.0)),
    )


def write_rewards(records: Iterable[RewardRecord | EvaluationFailure], path: str | Path) -> int:
    return write_records(path, REWARDS_SCHEMA, (reward_to_record(r) for r in records))


def read_rewards(path: str | Path) -> list[RewardRecord | EvaluationFailure]:
    return [reward_from_record(rec) for _, rec in read_records(path, schema=REWARDS_SCHEMA)]
