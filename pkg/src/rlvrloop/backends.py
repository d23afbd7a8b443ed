"""Policy backends: anything that turns a prompt into a completion.

The engine only relies on the generate() contract plus a few capability
flags, so a desk-scale tabular policy, a scripted stub, and a remote
text-generation endpoint are interchangeable. Local backends must be
deterministic for a fixed (prompt, params); remote ones are exempt but get
flagged so downstream determinism checks can skip them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import prompts
from .errors import BackendError
from .jsonl import derive_seed
from .policy import TabularPolicy


@dataclass(frozen=True)
class SamplingParams:
    temperature: float
    seed: int
    max_tokens: int = 256

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens <= 0:
            raise ValueError(f"max_tokens must be > 0, got {self.max_tokens}")


@dataclass
class Completion:
    text: str
    token_logprobs: list[float] | None = None


class PolicyBackend:
    """Base contract. Subclasses override generate()."""

    backend_id: str = "base"
    supports_logprobs: bool = False
    deterministic: bool = True
    max_concurrency: int | None = None  # None means no declared limit

    def generate(self, prompt: str, params: SamplingParams) -> Completion:
        raise NotImplementedError


class TabularPolicyBackend(PolicyBackend):
    """Reads scaffold prompts and answers from a TabularPolicy.

    Localization samples a statement index from the line softmax; repair
    samples a candidate index conditioned on the statement named in the
    prompt. A hint block naming a statement restricts the localization
    action space to that statement, which is the desk-scale mechanization
    of "the model may follow the hint".
    """

    supports_logprobs = True

    def __init__(self, policy: TabularPolicy, backend_id: str = "tabular"):
        self.policy = policy
        self.backend_id = backend_id

    def generate(self, prompt: str, params: SamplingParams) -> Completion:
        task_id = prompts.prompt_task_id(prompt)
        if task_id is None or task_id not in self.policy.heads:
            raise BackendError(f"{self.backend_id}: prompt names no known task")
        rng = np.random.default_rng(derive_seed(self.backend_id, task_id, params.seed))
        step = prompts.prompt_step(prompt)

        if step == prompts.LOC_STEP:
            hinted = prompts.prompt_hint_line(prompt)
            n_lines = self.policy.head(task_id).line_logits.size
            if hinted is not None and 0 <= hinted < n_lines:
                line = hinted
                lp = 0.0
            else:
                line = self.policy.sample_line(task_id, params.temperature, rng)
                lp = float(np.log(self.policy.line_probs(task_id)[line]))
            return Completion(text=prompts.format_line_completion(line), token_logprobs=[lp])

        if prompts.prompt_is_whole_workspace_repair(prompt):
            line = self.policy.sample_line(task_id, params.temperature, rng)
            cand = self.policy.sample_cand(task_id, line, params.temperature, rng)
            return Completion(text=prompts.format_line_candidate_completion(line, cand))

        line = prompts.prompt_repair_line(prompt)
        if line is None:
            raise BackendError(f"{self.backend_id}: repair prompt names no statement")
        cand = self.policy.sample_cand(task_id, line, params.temperature, rng)
        lp = float(np.log(self.policy.cand_probs(task_id, line)[cand]))
        return Completion(text=prompts.format_candidate_completion(cand), token_logprobs=[lp])


@dataclass
class ScriptedBackend(PolicyBackend):
    """Replays canned completions in order; for tests and dry runs.

    Entries may be strings, Completion objects, or Exception instances
    (raised on consumption, to exercise retry paths).
    """

    script: list = field(default_factory=list)
    backend_id: str = "scripted"
    supports_logprobs: bool = False
    max_concurrency: int | None = 1

    def __post_init__(self):
        self._cursor = 0
        self.prompts_seen: list[str] = []

    def generate(self, prompt: str, params: SamplingParams) -> Completion:
        self.prompts_seen.append(prompt)
        if self._cursor >= len(self.script):
            raise BackendError(f"{self.backend_id}: script exhausted after {self._cursor} calls")
        entry = self.script[self._cursor]
        self._cursor += 1
        if isinstance(entry, Exception):
            raise entry
        if isinstance(entry, Completion):
            return entry
        return Completion(text=str(entry))


class HttpPolicyBackend(PolicyBackend):
    """Client for the remote text-generation wire protocol.

    Request JSON:  {"prompt", "temperature", "seed", "max_tokens"}
    Response JSON: {"completion": str, "token_logprobs": [float] | null}

    Remote decoders may not honor seeds bit-exactly, so the backend is
    flagged non-deterministic and pipelines surface that in run manifests.
    """

    deterministic = False

    def __init__(self, endpoint: str, backend_id: str = "remote", timeout_s: float = 60.0, session=None):
        if session is None:
            import requests

            session = requests.Session()
        self.endpoint = endpoint
        self.backend_id = backend_id
        self.timeout_s = timeout_s
        self.session = session
        self.supports_logprobs = True

    def build_request(self, prompt: str, params: SamplingParams) -> dict:
        return {
            "prompt": prompt,
            "temperature": params.temperature,
            "seed": params.seed,
            "max_tokens": params.max_tokens,
        }

    def generate(self, prompt: str, params: SamplingParams) -> Completion:
        try:
            resp = self.session.post(
                self.endpoint, json=self.build_request(prompt, params), timeout=self.timeout_s
            )
        except Exception as exc:
            raise BackendError(f"{self.backend_id}: request failed: {exc}") from exc
        if getattr(resp, "status_code", 500) != 200:
            raise BackendError(f"{self.backend_id}: HTTP {resp.status_code}")
        try:
            body = resp.json()
            text = body["completion"]
        except Exception as exc:
            raise BackendError(f"{self.backend_id}: malformed response: {exc}") from exc
        return Completion(text=text, token_logprobs=body.get("token_logprobs"))
