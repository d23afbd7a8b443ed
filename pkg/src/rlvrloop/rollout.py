"""Two-step rollout scaffold: localize, then repair.

Each attempt at a task is exactly one localization step and one repair step.
Malformed completions are data, not errors: they produce an empty patch that
the evaluator scores as reward 0. Backend failures are retried, and a slot
whose backend never recovers still yields a placeholder trajectory so rollout
counts stay exact.

Guidance may only be injected during training. Evaluation-mode rollouts with
guidance raise GuidanceLeakError, which is the engine-level enforcement of
"hints never touch held-out measurements".
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from . import prompts
from .backends import Completion, PolicyBackend, SamplingParams
from .errors import BackendError, GuidanceLeakError, RolloutError, TaskFormatError
from .guidance import Guidance, render_reattempt_prompt
from .jsonl import append_record, derive_seed, read_records, write_records
from .tasks import SynthTask, Task

TEMPERATURE_GREEDY = 0.0
TEMPERATURE_SAMPLING = 0.6

TRAJECTORIES_SCHEMA = "trajectories"


@dataclass(frozen=True)
class Patch:
    """Structured edit set plus a human-readable rendering.

    For synthetic tasks the rendering is the "(line, candidate)" pair and
    synth carries the indices; for real tasks the rendering is diff-style
    text and synth is None.
    """

    edits: tuple[tuple[str, str], ...]
    rendering: str
    synth: tuple[int, int] | None = None


@dataclass(frozen=True)
class Step:
    role: str  # "localization" or "repair"
    prompt: str
    completion: str


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    steps: tuple[Step, ...]
    patch: Patch | None
    guidance_id: str | None
    sampling: SamplingParams
    backend_id: str
    on_policy: bool
    traj_id: str

    def response_text(self) -> str:
        return "\n".join(step.completion for step in self.steps)

    @property
    def actions(self) -> tuple[int, int] | None:
        return self.patch.synth if self.patch is not None else None

    @property
    def is_guided(self) -> bool:
        return self.guidance_id is not None


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------


def _synth_patch(task: SynthTask, line: int | None, completion: str) -> Patch | None:
    if line is None:
        # Whole-workspace repair: the completion must commit to both indices.
        line = prompts.parse_line_completion(completion)
    cand = prompts.parse_candidate_completion(completion)
    if line is None or cand is None:
        return None
    if not 0 <= line < task.n_lines or not 0 <= cand < task.n_candidates:
        return None
    text = task.candidates[line][cand]
    return Patch(
        edits=((f"line:{line}", text),),
        rendering=f"({line}, {cand})",
        synth=(line, cand),
    )


def _real_patch(completion: str) -> Patch | None:
    edits = prompts.parse_edit_blocks(completion)
    if not edits:
        return None
    chunks = []
    for location, replacement in edits:
        path, start, end = location.rsplit(":", 2)
        chunks.append(f"--- {path} [{start}:{end})")
        chunks.extend("+" + ln for ln in replacement.splitlines())
    return Patch(edits=tuple(edits), rendering="\n".join(chunks), synth=None)


def extract_patch(task: Task, location, repair_completion: str) -> Patch | None:
    """Parse a repair completion into a patch; None when nothing well-formed."""
    if task.is_synthetic:
        return _synth_patch(task, location, repair_completion)
    return _real_patch(repair_completion)


# ---------------------------------------------------------------------------
# Scaffold
# ---------------------------------------------------------------------------


def _call_with_retry(backend: PolicyBackend, prompt: str, params: SamplingParams, max_retries: int) -> Completion:
    last: BackendError | None = None
    for _ in range(max_retries + 1):
        try:
            return backend.generate(prompt, params)
        except BackendError as exc:
            last = exc
    assert last is not None
    raise last


def make_traj_id(task_id: str, backend_id: str, seed: int, guided: bool) -> str:
    suffix = "g" if guided else "u"
    return f"{task_id}/{backend_id}/{seed}/{suffix}"


def run_scaffold(
    task: Task,
    backend: PolicyBackend,
    params: SamplingParams,
    guidance: Guidance | None = None,
    *,
    eval_mode: bool = False,
    max_retries: int = 2,
    on_policy: bool = True,
) -> Trajectory:
    """One attempt at a task: localization then repair.

    The two steps get independent sub-seeds derived from params.seed so the
    line draw and the candidate draw are uncorrelated. With guidance, the
    hint block is appended to the localization prompt via the reattempt
    template; nothing else about the scaffold changes.
    """
    if eval_mode and guidance is not None:
        raise GuidanceLeakError(
            f"guidance {guidance.guidance_id} injected into an evaluation-mode rollout for {task.id}"
        )
    if guidance is not None and guidance.task_id != task.id:
        raise TaskFormatError(
            f"guidance {guidance.guidance_id} targets {guidance.task_id}, not {task.id}"
        )

    base_prompt = prompts.render_localization_prompt(task)
    loc_prompt = render_reattempt_prompt(base_prompt, guidance) if guidance is not None else base_prompt
    loc_params = replace(params, seed=derive_seed(params.seed, "loc"))
    loc_completion = _call_with_retry(backend, loc_prompt, loc_params, max_retries)

    if task.is_synthetic:
        line = prompts.parse_line_completion(loc_completion.text)
        if line is not None and not 0 <= line < task.n_lines:
            line = None  # nonsense index falls back to whole-workspace repair
        location = line
    else:
        location = prompts.parse_files_completion(loc_completion.text)

    repair_prompt = prompts.render_repair_prompt(task, location)
    repair_params = replace(params, seed=derive_seed(params.seed, "repair"))
    repair_completion = _call_with_retry(backend, repair_prompt, repair_params, max_retries)

    patch = extract_patch(task, location, repair_completion.text)
    guided = guidance is not None
    return Trajectory(
        task_id=task.id,
        steps=(
            Step(prompts.LOC_STEP, loc_prompt, loc_completion.text),
            Step(prompts.REPAIR_STEP, repair_prompt, repair_completion.text),
        ),
        patch=patch,
        guidance_id=guidance.guidance_id if guided else None,
        sampling=params,
        backend_id=backend.backend_id,
        on_policy=on_policy,
        traj_id=make_traj_id(task.id, backend.backend_id, params.seed, guided),
    )


def _failure_trajectory(task: Task, backend: PolicyBackend, params: SamplingParams) -> Trajectory:
    prompt = prompts.render_localization_prompt(task)
    return Trajectory(
        task_id=task.id,
        steps=(Step(prompts.LOC_STEP, prompt, ""), Step(prompts.REPAIR_STEP, "", "")),
        patch=None,
        guidance_id=None,
        sampling=params,
        backend_id=backend.backend_id,
        on_policy=True,
        traj_id=make_traj_id(task.id, backend.backend_id, params.seed, False),
    )


def rollout_params(base_seed: int, task_id: str, slot: int, max_tokens: int = 256) -> SamplingParams:
    """Slot 0 is the greedy decode; every later slot samples at 0.6."""
    temperature = TEMPERATURE_GREEDY if slot == 0 else TEMPERATURE_SAMPLING
    return SamplingParams(
        temperature=temperature,
        seed=derive_seed(base_seed, task_id, slot),
        max_tokens=max_tokens,
    )


def sample_rollouts(
    task: Task,
    backend: PolicyBackend,
    n: int,
    base_seed: int,
    *,
    max_tokens: int = 256,
    max_retries: int = 2,
    eval_mode: bool = False,
) -> list[Trajectory]:
    """Exactly n unguided attempts at a task.

    Backend failures never shrink the batch: a dead slot becomes an
    empty-patch placeholder so downstream pass@k math sees the intended n.
    Only a batch where every slot failed raises.
    """
    if n < 1:
        raise RolloutError(f"rollout count must be >= 1, got {n}")
    out: list[Trajectory] = []
    failures = 0
    for slot in range(n):
        params = rollout_params(base_seed, task.id, slot, max_tokens)
        try:
            out.append(run_scaffold(task, backend, params, max_retries=max_retries, eval_mode=eval_mode))
        except BackendError:
            failures += 1
            out.append(_failure_trajectory(task, backend, params))
    if failures == n:
        raise RolloutError(f"all {n} rollout slots failed at the backend for task {task.id}")
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def trajectory_to_record(traj: Trajectory) -> dict:
    return {
        "traj_id": traj.traj_id,
        "task_id": traj.task_id,
        "steps": [{"role": s.role, "prompt": s.prompt, "completion": s.completion} for s in traj.steps],
        "patch": None
        if traj.patch is None
        else {
            "edits": [list(e) for e in traj.patch.edits],
            "rendering": traj.patch.rendering,
            "synth": list(traj.patch.synth) if traj.patch.synth else None,
        },
        "guidance_id": traj.guidance_id,
        "sampling": {
            "temperature": traj.sampling.temperature,
            "seed": traj.sampling.seed,
            "max_tokens": traj.sampling.max_tokens,
        },
        "backend_id": traj.backend_id,
        "on_policy": traj.on_policy,
    }


def trajectory_from_record(rec: dict) -> Trajectory:
    patch = None
    if rec.get("patch") is not None:
        p = rec["patch"]
        patch = Patch(
            edits=tuple((loc, text) for loc, text in p["edits"]),
            rendering=p["rendering"],
            synth=tuple(p["synth"]) if p.get("synth") else None,
        )
    return Trajectory(
        task_id=rec["task_id"],
        steps=tuple(Step(s["role"], s["prompt"], s["completion"]) for s in rec["steps"]),
        patch=patch,
        guidance_id=rec.get("guidance_id"),
        sampling=SamplingParams(
            temperature=rec["sampling"]["temperature"],
            seed=rec["sampling"]["seed"],
            max_tokens=rec["sampling"]["max_tokens"],
        ),
        backend_id=rec["backend_id"],
        on_policy=bool(rec.get("on_policy", True)),
        traj_id=rec["traj_id"],
    )


def write_trajectories(trajectories: Iterable[Trajectory], path: str | Path) -> int:
    return write_records(path, TRAJECTORIES_SCHEMA, (trajectory_to_record(t) for t in trajectories))


def read_trajectories(path: str | Path) -> list[Trajectory]:
    return [trajectory_from_record(rec) for _, rec in read_records(path, schema=TRAJECTORIES_SCHEMA)]


class TrajectoryStore:
    """Append-only JSONL store keyed by (task_id, backend_id, seed).

    Re-appending an existing key is always a pipeline bug (it would silently
    double-count a rollout slot), so it raises instead of overwriting.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._keys: set[tuple[str, str, int]] = set()
        if self.path.exists():
            for traj in read_trajectories(self.path):
                self._keys.add((traj.task_id, traj.backend_id, traj.sampling.seed))

    def append(self, traj: Trajectory) -> None:
        key = (traj.task_id, traj.backend_id, traj.sampling.seed)
        if key in self._keys:
            raise RolloutError(f"duplicate trajectory key {key}")
        append_record(self.path, TRAJECTORIES_SCHEMA, trajectory_to_record(traj))
        self._keys.add(key)

    def __len__(self) -> int:
        return len(self._keys)
