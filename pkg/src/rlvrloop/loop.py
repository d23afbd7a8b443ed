"""One full training iteration, phase by phase, with a resumable run state.

Phases: tasks -> rollout -> evaluate -> guide -> reattempt ->
evaluate-guided -> assemble -> train-sft -> train-dpo -> final-eval ->
report. Every phase reads its inputs from files and writes its outputs to
files under the run directory, which buys three properties at once: a
failed phase can resume without redoing earlier work, the stand-alone CLI
subcommands produce byte-identical artifacts to the loop, and the manifest
can hash everything the run touched.

All randomness is derived from config.seed through labeled sub-seeds; the
wall clock never feeds any decision, so rerunning a config reproduces every
deterministic artifact hash exactly.
"""
from __future__ import annotations

import configparser
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .backends import HttpPolicyBackend, PolicyBackend, SamplingParams, TabularPolicyBackend
from .errors import PhaseError, RlvrLoopError, UsageError
from .evaluator import (
    EvaluationFailure,
    evaluate_batch,
    read_rewards,
    write_rewards,
)
from .guidance import (
    GUIDANCE_SCHEMA,
    HttpTeacherBackend,
    TeacherBackend,
    guidance_from_record,
    guidance_to_record,
    oracle_teacher,
    request_guidance,
)
from .jsonl import canonical_file_hash, derive_seed, read_records, write_records
from .metrics import aggregate, guidance_uplift_report, render_report_text
from .pairs import build_rlvr_dataset, emit_dataset, load_dataset
from .policy import ReferencePolicy, TabularPolicy
from .rollout import (
    TEMPERATURE_SAMPLING,
    read_trajectories,
    run_scaffold,
    sample_rollouts,
    write_trajectories,
)
from .tasks import TaskDataset, generate_synth_suite, load_tasks, save_tasks
from .training import DPOConfig, dpo_train, sft_train, write_history_csv

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "run_manifest"

PHASES = (
    "tasks",
    "rollout",
    "evaluate",
    "guide",
    "reattempt",
    "evaluate-guided",
    "assemble",
    "train-sft",
    "train-dpo",
    "final-eval",
    "report",
)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    output_dir: str = "runs/out"
    seed: int = 0
    workers: int = 4
    rollouts_n: int = 16
    max_tokens: int = 256
    guidance_enabled: bool = True

    tasks_path: str = ""
    synth_count: int = 64
    synth_lines: int = 6
    synth_candidates: int = 8

    backend_kind: str = "tabular"
    backend_endpoint: str = ""
    teacher_kind: str = "oracle"
    teacher_endpoint: str = ""
    initial_policy: str = ""
    container_image: str = ""

    sft_fraction: float = 0.2
    max_pairs_per_task: int = 4
    keep_guidance_in_prompt: bool = False
    include_guided_in_sft: bool = False

    sft_learning_rate: float = 0.5
    sft_epochs: int = 100
    dpo_beta: float = 0.1
    dpo_learning_rate: float = 0.5
    dpo_epochs: int = 200

    rm_learning_rate: float = 0.5
    rm_epochs: int = 200
    rm_k: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


# Flat key=value sections in the config file, mapped onto RunConfig fields.
_SECTION_FIELDS = {
    "run": (
        "output_dir", "seed", "workers", "rollouts_n", "max_tokens", "guidance_enabled",
    ),
    "tasks": ("tasks_path", "synth_count", "synth_lines", "synth_candidates"),
    "backend": ("backend_kind", "backend_endpoint", "initial_policy", "container_image"),
    "teacher": ("teacher_kind", "teacher_endpoint"),
    "assemble": (
        "sft_fraction", "max_pairs_per_task", "keep_guidance_in_prompt", "include_guided_in_sft",
    ),
    "sft": ("sft_learning_rate", "sft_epochs"),
    "dpo": ("dpo_beta", "dpo_learning_rate", "dpo_epochs"),
    "rm": ("rm_learning_rate", "rm_epochs", "rm_k"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES.get(name)
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config value {name}={raw!r} is not a boolean")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise UsageError(f"config value {name}={raw!r}: {exc}") from exc
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an INI-style file plus key=value overrides.

    Overrides use 'section.key=value' and win over the file; unknown
    sections or keys are usage errors, not silent typo sinks.
    """
    config = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise UsageError(f"config file {path} not found")
        for section in parser.sections():
            if section not in _SECTION_FIELDS:
                raise UsageError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SECTION_FIELDS[section]:
                    raise UsageError(f"unknown config key {section}.{key}")
                setattr(config, key, _coerce(key, raw))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override {item!r} is not section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SECTION_FIELDS or key not in _SECTION_FIELDS[section]:
            raise UsageError(f"unknown config key {dotted!r}")
        setattr(config, key, _coerce(key, raw))
    return config


# ---------------------------------------------------------------------------
# Run directory layout
# ---------------------------------------------------------------------------


class RunPaths:
    def __init__(self, output_dir: str | Path):
        self.dir = Path(output_dir)
        self.tasks = self.dir / "tasks.jsonl"
        self.policy_init = self.dir / "policy_init.json"
        self.rollouts = self.dir / "rollouts.jsonl"
        self.rewards = self.dir / "rewards.jsonl"
        self.guidance = self.dir / "guidance.jsonl"
        self.guided_rollouts = self.dir / "guided_rollouts.jsonl"
        self.guided_rewards = self.dir / "guided_rewards.jsonl"
        self.dataset = self.dir / "dataset.jsonl"
        self.policy_sft = self.dir / "policy_sft.json"
        self.sft_log = self.dir / "sft_log.csv"
        self.policy_final = self.dir / "policy_final.json"
        self.dpo_log = self.dir / "dpo_log.csv"
        self.eval_rollouts = self.dir / "eval_rollouts.jsonl"
        self.eval_rewards = self.dir / "eval_rewards.jsonl"
        self.report_json = self.dir / "report.json"
        self.report_txt = self.dir / "report.txt"
        self.state = self.dir / "runstate.json"
        self.manifest = self.dir / "manifest.json"


class RunState:
    def __init__(self, path: Path):
        self.path = path
        self.completed: list[str] = []
        if path.exists():
            self.completed = json.loads(path.read_text(encoding="utf-8")).get("completed", [])

    def mark(self, phase: str) -> None:
        if phase not in self.completed:
            self.completed.append(phase)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(
            json.dumps({"completed": self.completed}, sort_keys=True) + "\n", encoding="utf-8"
        )


# ---------------------------------------------------------------------------
# Shared phase helpers (the CLI subcommands call these directly)
# ---------------------------------------------------------------------------


def build_backend(config: RunConfig, policy: TabularPolicy) -> PolicyBackend:
    if config.backend_kind == "tabular":
        return TabularPolicyBackend(policy)
    if config.backend_kind == "remote":
        if not config.backend_endpoint:
            raise UsageError("backend_kind=remote requires backend_endpoint")
        return HttpPolicyBackend(config.backend_endpoint)
    raise UsageError(f"unknown backend kind {config.backend_kind!r}")


def build_teacher(config: RunConfig) -> TeacherBackend | None:
    """None means the built-in oracle; anything else is a text teacher."""
    if config.teacher_kind == "oracle":
        return None
    if config.teacher_kind == "remote":
        if not config.teacher_endpoint:
            raise UsageError("teacher_kind=remote requires teacher_endpoint")
        return HttpTeacherBackend(config.teacher_endpoint)
    raise UsageError(f"unknown teacher kind {config.teacher_kind!r}")


def resolve_tasks(config: RunConfig) -> TaskDataset:
    if config.tasks_path:
        return load_tasks(config.tasks_path)
    return generate_synth_suite(
        config.synth_count, config.synth_lines, config.synth_candidates, config.seed
    )


def rollout_all_tasks(
    dataset: TaskDataset,
    backend: PolicyBackend,
    n: int,
    base_seed: int,
    *,
    workers: int = 4,
    max_tokens: int = 256,
    eval_mode: bool = False,
) -> list:
    """Per-task rollout batches, flattened in dataset order.

    Tasks parallelize across threads; slot seeds are derived per (task,
    slot) so scheduling order cannot change any sample.
    """
    def one(task):
        return sample_rollouts(
            task, backend, n, base_seed, max_tokens=max_tokens, eval_mode=eval_mode
        )

    if workers <= 1 or backend.max_concurrency == 1 or len(dataset) <= 1:
        batches = [one(t) for t in dataset]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(one, dataset.tasks))
    return [traj for batch in batches for traj in batch]


def evaluate_trajectories(dataset: TaskDataset, trajectories, *, workers: int = 4, container_image: str = ""):
    items = [(dataset.by_id[t.task_id], t) for t in trajectories]
    return evaluate_batch(items, workers=workers, container_image=container_image or None)


def guide_failures(
    dataset: TaskDataset,
    trajectories,
    records,
    teacher: TeacherBackend | None,
) -> list:
    """One guidance record per failed unguided attempt, in record order."""
    by_ref = {t.traj_id: t for t in trajectories}
    out = []
    for rec in records:
        if isinstance(rec, EvaluationFailure) or rec.reward != 0:
            continue
        traj = by_ref.get(rec.trajectory_ref)
        if traj is None or traj.is_guided:
            continue
        task = dataset.by_id[rec.task_id]
        if teacher is None:
            out.append(oracle_teacher(task, traj, rec))
        else:
            out.append(request_guidance(task, traj, rec, teacher))
    return out


def reattempt_with_guidance(
    dataset: TaskDataset,
    guidance_list,
    backend: PolicyBackend,
    base_seed: int,
    *,
    max_tokens: int = 256,
    workers: int = 4,
) -> list:
    """One guided reattempt per guidance record, seeded off the source ref."""
    def one(guidance):
        task = dataset.by_id[guidance.task_id]
        params = SamplingParams(
            temperature=TEMPERATURE_SAMPLING,
            seed=derive_seed(base_seed, "reattempt", guidance.source_trajectory_ref),
            max_tokens=max_tokens,
        )
        return run_scaffold(task, backend, params, guidance=guidance)

    if workers <= 1 or backend.max_concurrency == 1 or len(guidance_list) <= 1:
        return [one(g) for g in guidance_list]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, guidance_list))


def write_guidance(guidance_list, path: Path) -> None:
    write_records(path, GUIDANCE_SCHEMA, (guidance_to_record(g) for g in guidance_list))


def read_guidance(path: Path) -> list:
    return [guidance_from_record(rec) for _, rec in read_records(path, schema=GUIDANCE_SCHEMA)]


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


def run_loop(config: RunConfig, resume: bool = False) -> dict:
    """Execute one training iteration; returns the manifest dict.

    A phase failure checkpoints the run state and raises PhaseError; rerun
    with resume=True to pick up after the last completed phase. Another
    iteration on top of a finished run is a fresh invocation pointing
    initial_policy at the previous run's policy_final.json.
    """
    paths = RunPaths(config.output_dir)
    paths.dir.mkdir(parents=True, exist_ok=True)
    state = RunState(paths.state)
    if not resume and state.completed:
        raise UsageError(
            f"{paths.dir} already holds a run (phases {state.completed}); pass resume to continue"
        )

    def phase(name: str, fn) -> None:
        if name in state.completed:
            log.info("phase %-16s already complete, skipping", name)
            return
        log.info("phase %-16s starting", name)
        try:
            fn()
        except RlvrLoopError as exc:
            raise PhaseError(name, str(exc)) from exc
        state.mark(name)

    # -- tasks ---------------------------------------------------------------
    def do_tasks():
        save_tasks(resolve_tasks(config), paths.tasks)
        if config.initial_policy:
            policy = TabularPolicy.load(config.initial_policy)
        else:
            policy = TabularPolicy.uniform(load_tasks(paths.tasks))
        policy.save(paths.policy_init, provenance={"phase": "init"})

    phase("tasks", do_tasks)
    dataset = load_tasks(paths.tasks)

    # -- unguided rollouts ----------------------------------------------------
    def do_rollout():
        policy = TabularPolicy.load(paths.policy_init)
        backend = build_backend(config, policy)
        trajs = rollout_all_tasks(
            dataset, backend, config.rollouts_n, config.seed,
            workers=config.workers, max_tokens=config.max_tokens,
        )
        write_trajectories(trajs, paths.rollouts)

    phase("rollout", do_rollout)

    def do_evaluate():
        trajs = read_trajectories(paths.rollouts)
        records = evaluate_trajectories(
            dataset, trajs, workers=config.workers, container_image=config.container_image
        )
        write_rewards(records, paths.rewards)

    phase("evaluate", do_evaluate)

    # -- guidance on failures ---------------------------------------------------
    def do_guide():
        if not config.guidance_enabled:
            write_guidance([], paths.guidance)
            return
        trajs = read_trajectories(paths.rollouts)
        records = read_rewards(paths.rewards)
        teacher = build_teacher(config)
        write_guidance(guide_failures(dataset, trajs, records, teacher), paths.guidance)

    phase("guide", do_guide)

    def do_reattempt():
        guidance_list = read_guidance(paths.guidance)
        if not guidance_list:
            write_trajectories([], paths.guided_rollouts)
            return
        policy = TabularPolicy.load(paths.policy_init)
        backend = build_backend(config, policy)
        trajs = reattempt_with_guidance(
            dataset, guidance_list, backend, config.seed,
            max_tokens=config.max_tokens, workers=config.workers,
        )
        write_trajectories(trajs, paths.guided_rollouts)

    phase("reattempt", do_reattempt)

    def do_evaluate_guided():
        trajs = read_trajectories(paths.guided_rollouts)
        records = evaluate_trajectories(
            dataset, trajs, workers=config.workers, container_image=config.container_image
        )
        write_rewards(records, paths.guided_rewards)

    phase("evaluate-guided", do_evaluate_guided)

    # -- pair assembly ----------------------------------------------------------
    def do_assemble():
        rlvr = build_rlvr_dataset(
            read_trajectories(paths.rollouts),
            read_rewards(paths.rewards),
            read_trajectories(paths.guided_rollouts),
            read_rewards(paths.guided_rewards),
            read_guidance(paths.guidance),
            sft_fraction=config.sft_fraction,
            max_pairs_per_task=config.max_pairs_per_task,
            seed=config.seed,
            keep_guidance_in_prompt=config.keep_guidance_in_prompt,
            include_guided_in_sft=config.include_guided_in_sft,
        )
        emit_dataset(rlvr, paths.dataset)

    phase("assemble", do_assemble)

    # -- optimization ------------------------------------------------------------
    def do_train_sft():
        policy = TabularPolicy.load(paths.policy_init)
        rlvr = load_dataset(paths.dataset)
        history: list = []
        if policy.fine_tuned:
            log.info("policy already fine-tuned; skipping sft")
        else:
            sft_config = DPOConfig(
                beta=config.dpo_beta,
                learning_rate=config.sft_learning_rate,
                epochs=config.sft_epochs,
                seed=config.seed,
            )
            sft_train(policy, rlvr.sft, sft_config, history_out=history)
        policy.save(paths.policy_sft, provenance={"phase": "sft"})
        write_history_csv(history, paths.sft_log)

    phase("train-sft", do_train_sft)

    def do_train_dpo():
        policy = TabularPolicy.load(paths.policy_sft)
        reference = ReferencePolicy(policy)
        rlvr = load_dataset(paths.dataset)
        history: list = []
        dpo_config = DPOConfig(
            beta=config.dpo_beta,
            learning_rate=config.dpo_learning_rate,
            epochs=config.dpo_epochs,
            seed=config.seed,
        )
        dpo_train(policy, rlvr.pairs, dpo_config, reference=reference, history_out=history)
        policy.save(paths.policy_final, provenance={"phase": "dpo"})
        write_history_csv(history, paths.dpo_log)

    phase("train-dpo", do_train_dpo)

    # -- held-out style evaluation of the trained policy --------------------------
    def do_final_eval():
        policy = TabularPolicy.load(paths.policy_final)
        backend = build_backend(config, policy)
        trajs = rollout_all_tasks(
            dataset, backend, config.rollouts_n, derive_seed(config.seed, "final-eval"),
            workers=config.workers, max_tokens=config.max_tokens, eval_mode=True,
        )
        write_trajectories(trajs, paths.eval_rollouts)
        records = evaluate_trajectories(
            dataset, trajs, workers=config.workers, container_image=config.container_image
        )
        write_rewards(records, paths.eval_rewards)

    phase("final-eval", do_final_eval)

    def do_report():
        pre = aggregate(
            read_trajectories(paths.rollouts), read_rewards(paths.rewards),
            bootstrap_seed=config.seed,
        )
        uplift = guidance_uplift_report(
            read_rewards(paths.rewards), read_rewards(paths.guided_rewards)
        )
        post = aggregate(
            read_trajectories(paths.eval_rollouts), read_rewards(paths.eval_rewards),
            guidance_uplift=uplift, bootstrap_seed=config.seed,
        )
        body = {"pre_training": pre.to_dict(), "post_training": post.to_dict()}
        paths.report_json.write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        text = (
            "== pre-training (rollout phase) ==\n"
            + render_report_text(pre)
            + "\n\n== post-training (final eval) ==\n"
            + render_report_text(post)
            + "\n"
        )
        paths.report_txt.write_text(text, encoding="utf-8")

    phase("report", do_report)

    return write_manifest(config, paths)


def write_manifest(config: RunConfig, paths: RunPaths) -> dict:
    """Hash every artifact the run produced; the manifest excludes itself."""
    artifacts = []
    for file in sorted(paths.dir.rglob("*")):
        if not file.is_file() or file == paths.manifest:
            continue
        artifacts.append(
            {
                "path": str(file.relative_to(paths.dir)),
                "sha256": canonical_file_hash(file),
            }
        )
    backend_deterministic = config.backend_kind != "remote"
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "schema_version": 1,
        "config": config.to_dict(),
        "backend_deterministic": backend_deterministic,
        "artifacts": artifacts,
    }
    paths.manifest.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return manifest


def count_infra_errors(paths: RunPaths) -> int:
    total = 0
    for file in (paths.rewards, paths.guided_rewards, paths.eval_rewards):
        if file.exists():
            total += sum(1 for r in read_rewards(file) if isinstance(r, EvaluationFailure))
    return total
