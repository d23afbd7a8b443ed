"""Prompt rendering and completion parsing for the two-step scaffold.

Prompts are plain text but carry machine-readable markers (task id, step
kind, numbered listings) so desk-scale backends can parse them the way a
language model would read them. Completions answer with fenced blocks; a
completion that fails to parse yields an empty patch rather than an error.
"""
from __future__ import annotations

import re
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .tasks import SynthTask, Task

HINT_DELIMITER = "### Hint ###"

LOC_STEP = "localization"
REPAIR_STEP = "repair"

# Real-repo localization asks for this many suspect files by default; the
# synthetic scaffold always asks for a single statement index.
DEFAULT_LOCALIZATION_FILES = 5
DEFAULT_LOCALIZATION_LINES = 1


def render_localization_prompt(task: "Task") -> str:
    if task.is_synthetic:
        listing = "\n".join(f"  {i}: {line}" for i, line in enumerate(task.lines))
        return (
            f"Repository: {task.repo_name}\n"
            f"Task: {task.id}\n\n"
            f"### Issue ###\n{task.issue}\n\n"
            f"### Program ###\n{listing}\n\n"
            f"Identify the statement that must change to fix the issue.\n"
            f"Respond with exactly one fenced block naming {DEFAULT_LOCALIZATION_LINES} statement index:\n"
            f"```\nLINE: <index>\n```"
        )
    return (
        f"Repository: {task.repo_name}\n"
        f"Task: {task.id}\n\n"
        f"### Issue ###\n{task.issue}\n\n"
        f"Workspace: {task.workspace}\n\n"
        f"Identify the files that must change to fix the issue.\n"
        f"Respond with exactly one fenced block listing up to {DEFAULT_LOCALIZATION_FILES} file paths:\n"
        f"```\nFILES:\n<path>\n...\n```"
    )


def render_repair_prompt(task: "Task", location) -> str:
    """Repair prompt given a committed localization.

    location is a statement index for synthetic tasks or a list of file
    paths for real ones. None means localization was unparseable and the
    repair must consider the whole workspace.
    """
    header = f"Repository: {task.repo_name}\nTask: {task.id}\n\n### Issue ###\n{task.issue}\n\n"
    if task.is_synthetic:
        if location is None:
            listing = "\n".join(f"  {i}: {line}" for i, line in enumerate(task.lines))
            menus = []
            for i, row in enumerate(task.candidates):
                opts = "\n".join(f"    {k}: {stmt}" for k, stmt in enumerate(row))
                menus.append(f"  statement {i}:\n{opts}")
            return (
                header
                + f"### Program ###\n{listing}\n\n"
                + "No statement was localized; consider the whole program.\n"
                + "Candidate replacements per statement:\n"
                + "\n".join(menus)
                + "\n\nRespond with exactly one fenced block:\n```\nLINE: <index>\nCANDIDATE: <index>\n```"
            )
        row = task.candidates[location]
        opts = "\n".join(f"  {k}: {stmt}" for k, stmt in enumerate(row))
        return (
            header
            + f"You will repair statement {location}: {task.lines[location]}\n"
            + f"Candidate replacements:\n{opts}\n\n"
            + "Respond with exactly one fenced block:\n```\nCANDIDATE: <index>\n```"
        )
    files = "(whole workspace)" if location is None else "\n".join(location)
    return (
        header
        + f"Files under repair:\n{files}\n\n"
        + "Respond with one or more edit blocks:\n"
        + "```\nEDIT: <path>:<start>:<end>\n<replacement lines>\nEND EDIT\n```\n"
        + "Line ranges are zero-based half-open."
    )


# ---------------------------------------------------------------------------
# Prompt introspection (used by desk-scale backends)
# ---------------------------------------------------------------------------

_TASK_RE = re.compile(r"^Task: (\S+)$", re.MULTILINE)
_REPAIR_LINE_RE = re.compile(r"^You will repair statement (\d+):", re.MULTILINE)
_HINT_LINE_RE = re.compile(r"\bline\s+(\d+)\b")


def prompt_task_id(prompt: str) -> str | None:
    m = _TASK_RE.search(prompt)
    return m.group(1) if m else None


def prompt_step(prompt: str) -> str:
    """Infer which scaffold step a prompt belongs to from its reply format."""
    if "You will repair statement" in prompt or "CANDIDATE: <index>" in prompt:
        return REPAIR_STEP
    return LOC_STEP


def prompt_repair_line(prompt: str) -> int | None:
    m = _REPAIR_LINE_RE.search(prompt)
    return int(m.group(1)) if m else None


def prompt_is_whole_workspace_repair(prompt: str) -> bool:
    return "consider the whole program" in prompt


def prompt_hint_line(prompt: str) -> int | None:
    """Statement index named by an embedded hint block, if any.

    The environment-interaction section is the last hint line mentioning a
    statement, so the final match wins when several numbers appear.
    """
    if HINT_DELIMITER not in prompt:
        return None
    block = prompt.split(HINT_DELIMITER, 1)[1]
    block = block.split("\n###", 1)[0]
    matches = _HINT_LINE_RE.findall(block)
    return int(matches[-1]) if matches else None


# ---------------------------------------------------------------------------
# Completion formats
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:\w+)?\n(.*?)```", re.DOTALL)
_LINE_RE = re.compile(r"^LINE:\s*(-?\d+)\s*$", re.MULTILINE)
_CAND_RE = re.compile(r"^CANDIDATE:\s*(-?\d+)\s*$", re.MULTILINE)
_FILES_RE = re.compile(r"^FILES:\s*$", re.MULTILINE)
_EDIT_RE = re.compile(r"^EDIT:\s*(\S+?):(\d+):(\d+)\n(.*?)^END EDIT\s*$", re.MULTILINE | re.DOTALL)


def format_line_completion(line: int) -> str:
    return f"```\nLINE: {line}\n```"

def format_candidate_completion(cand: int) -> str:
    return f"```\nCANDIDATE: {cand}\n```"

def format_line_candidate_completion(line: int, cand: int) -> str:
    return f"```\nLINE: {line}\nCANDIDATE: {cand}\n```"


def _fenced_or_raw(completion: str) -> str:
    m = _FENCE_RE.search(completion)
    return m.group(1) if m else completion


def parse_line_completion(completion: str) -> int | None:
    m = _LINE_RE.search(_fenced_or_raw(completion))
    return int(m.group(1)) if m else None


def parse_candidate_completion(completion: str) -> int | None:
    m = _CAND_RE.search(_fenced_or_raw(completion))
    return int(m.group(1)) if m else None


def parse_files_completion(completion: str) -> list[str] | None:
    body = _fenced_or_raw(completion)
    if not _FILES_RE.search(body):
        return None
    lines = body.split("FILES:", 1)[1].strip().splitlines()
    paths = [ln.strip() for ln in lines if ln.strip()]
    return paths or None


def parse_edit_blocks(completion: str) -> list[tuple[str, str]] | None:
    """Edits as (location, replacement) with location 'path:start:end'."""
    edits = []
    for m in _EDIT_RE.finditer(completion):
        path, start, end, body = m.group(1), m.group(2), m.group(3), m.group(4)
        edits.append((f"{path}:{start}:{end}", body.rstrip("\n")))
    return edits or None
