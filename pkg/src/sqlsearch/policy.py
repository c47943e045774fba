"""Generative policy interface, self-reward, and two implementations.

:class:`ScriptedPolicy` replays a fixed trie of fragments and is what tests
and fixtures run against.  :class:`RemotePolicy` talks to an HTTP completion
endpoint that returns per-token log-probabilities (the open completions API
shape).
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import requests

from .errors import ConfigError, EmptyBeam, NonFiniteLogprob, PolicyUnavailable, UnscorableSequence
from .fragmenter import DEFAULT_BOUNDARY_SET, BoundarySet, clip_continuation
from .schema_env import QUESTION_HEADER, SQL_MARKER

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Continuation:
    text: str
    token_logprobs: tuple[float, ...]
    total_logprob: float
    ends_sequence: bool = False

    def __post_init__(self):
        if abs(self.total_logprob - math.fsum(self.token_logprobs)) > 1e-9:
            raise ValueError("total_logprob must equal the sum of token logprobs")
        if not self.total_logprob <= 0:
            raise ValueError("total_logprob must be <= 0")

    @classmethod
    def single(cls, text: str, logprob: float, ends_sequence: bool = False) -> "Continuation":
        return cls(text, (float(logprob),), float(logprob), ends_sequence)


@dataclass
class PolicyConfig:
    alpha: float = 0.6
    beta: float = 100.0
    beam_width: int = 5
    max_fragment_tokens: int = 64
    decode_temperature: float = 0.6

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if not self.beta > 0:
            raise ConfigError("beta must be > 0")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")
        if self.max_fragment_tokens < 1:
            raise ConfigError("max_fragment_tokens must be >= 1")
        if self.decode_temperature < 0:
            raise ConfigError("decode_temperature must be >= 0")


def self_reward(total_logprob: float, config: PolicyConfig) -> float:
    """Confidence score ``beta + alpha * log p``."""
    if not math.isfinite(total_logprob):
        raise NonFiniteLogprob(f"logprob {total_logprob!r} is not finite")
    return config.beta + config.alpha * total_logprob


def split_state(state_text: str) -> tuple[Optional[str], str]:
    """Split a search state into (question, generated SQL so far).

    States without the SQL marker are treated as bare SQL.
    """
    at = state_text.rfind(SQL_MARKER)
    if at < 0:
        return None, state_text
    head, sql = state_text[:at], state_text[at + len(SQL_MARKER):]
    question = None
    q_at = head.rfind(QUESTION_HEADER)
    if q_at >= 0:
        question = head[q_at + len(QUESTION_HEADER):].split("\n", 1)[0]
    return question, sql


def _rank(cands: Sequence[Continuation], width: int) -> list[Continuation]:
    """Stable sort by logprob, first occurrence wins on duplicate text."""
    seen: set[str] = set()
    unique = []
    for c in cands:
        if c.text not in seen:
            seen.add(c.text)
            unique.append(c)
    return sorted(unique, key=lambda c: -c.total_logprob)[:width]


class Policy:
    """Base class; subclasses supply :meth:`beam_continuations` and :meth:`sequence_logprob`."""

    def beam_continuations(self, state_text: str, config: PolicyConfig) -> list[Continuation]:
        raise NotImplementedError

    def greedy_continuation(self, state_text: str, config: PolicyConfig) -> Continuation:
        beam = self.beam_continuations(state_text, config)
        if not beam:
            raise EmptyBeam(f"no continuation for state {state_text[-60:]!r}")
        return beam[0]

    def sequence_logprob(self, context: str, full_sql: str) -> float:
        raise NotImplementedError


class ScriptedPolicy(Policy):
    """Deterministic policy backed by a fragment trie.

    ``trie`` maps an SQL prefix to its ordered continuations
    ``[(fragment, logprob, ends_sequence), ...]``.  ``scoped`` optionally holds
    per-question tries that take precedence over ``trie`` when the state's
    question matches, so one file can script a whole task suite.
    """

    def __init__(self, trie: Optional[dict] = None, scoped: Optional[dict] = None):
        self.trie = {k: self._entries(v) for k, v in (trie or {}).items()}
        self.scoped = {
            q: {k: self._entries(v) for k, v in sub.items()} for q, sub in (scoped or {}).items()
        }

    @staticmethod
    def _entries(raw) -> tuple[Continuation, ...]:
        out = []
        for entry in raw:
            if isinstance(entry, dict):
                text, lp, ends = entry["text"], entry["logprob"], entry.get("ends", False)
            else:
                text, lp = entry[0], entry[1]
                ends = bool(entry[2]) if len(entry) > 2 else False
            lp = float(lp)
            if not math.isfinite(lp) or lp > 0:
                raise ValueError(f"scripted logprob {lp!r} for {text!r} must be finite and <= 0")
            out.append(Continuation.single(text, lp, ends))
        return tuple(out)

    @classmethod
    def from_file(cls, path) -> "ScriptedPolicy":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if "trie" in data or "by_question" in data:
            return cls(data.get("trie"), data.get("by_question"))
        return cls(data)

    def to_dict(self) -> dict:
        def dump(t):
            return {k: [[c.text, c.total_logprob, c.ends_sequence] for c in v] for k, v in t.items()}
        return {"trie": dump(self.trie), "by_question": {q: dump(t) for q, t in self.scoped.items()}}

    def _table(self, question: Optional[str]) -> dict:
        if question is not None and question in self.scoped:
            return self.scoped[question]
        return self.trie

    def beam_continuations(self, state_text: str, config: PolicyConfig) -> list[Continuation]:
        question, prefix = split_state(state_text)
        entries = self._table(question).get(prefix)
        if not entries:
            raise EmptyBeam(f"scripted trie has no entry for {prefix!r}")
        return _rank(entries, config.beam_width)

    def sequence_logprob(self, context: str, full_sql: str) -> float:
        question, _ = split_state(context)
        table = self._table(question)

        def walk(prefix: str) -> Optional[float]:
            rest = full_sql[len(prefix):]
            if not rest:
                return 0.0
            for cont in table.get(prefix, ()):
                if cont.text and rest.startswith(cont.text):
                    tail = walk(prefix + cont.text)
                    if tail is not None:
                        return cont.total_logprob + tail
            return None

        total = walk("")
        if total is None:
            raise UnscorableSequence(f"{full_sql!r} is not a path in the scripted trie")
        return total


class RemotePolicy(Policy):
    """HTTP completion-endpoint policy.

    Each request carries ``{prompt, n, max_tokens, temperature, stop,
    logprobs}``; responses follow the ``choices[].logprobs.{tokens,
    token_logprobs, text_offset}`` layout.  Servers that cannot decode N-best
    beams natively are sampled ``n`` times and de-duplicated.
    """

    def __init__(self, endpoint: str, api_key: Optional[str] = None, model: Optional[str] = None,
                 boundaries: BoundarySet = DEFAULT_BOUNDARY_SET, max_in_flight: int = 8,
                 retries: int = 3, backoff: float = 0.25, timeout: float = 60.0,
                 native_beam: bool = False, seed: Optional[int] = None,
                 session: Optional[requests.Session] = None):
        if not endpoint:
            raise ConfigError("remote policy needs an endpoint URL")
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.boundaries = boundaries
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.native_beam = native_beam
        self.seed = seed
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._session = session or requests.Session()

    def _post(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        if self.model:
            payload = {"model": self.model, **payload}
        if self.seed is not None:
            payload = {**payload, "seed": self.seed}
        last: Optional[Exception] = None
        with self._slots:
            for attempt in range(self.retries):
                try:
                    resp = self._session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
                    resp.raise_for_status()
                    return resp.json()
                except (requests.RequestException, ValueError) as exc:
                    last = exc
                    log.warning("completion request failed (attempt %d/%d): %s", attempt + 1, self.retries, exc)
                    if attempt + 1 < self.retries:
                        time.sleep(self.backoff * (2 ** attempt))
        raise PolicyUnavailable(f"{self.endpoint}: {last}")

    def _to_continuation(self, choice: dict) -> Optional[Continuation]:
        raw = choice.get("text", "")
        lp = choice.get("logprobs") or {}
        tokens = lp.get("tokens") or []
        token_lps = lp.get("token_logprobs") or []
        fragment, ends = clip_continuation(raw, self.boundaries)
        if not fragment.strip():
            return None
        kept: list[float] = []
        consumed = 0
        for tok, val in zip(tokens, token_lps):
            if consumed >= len(fragment):
                break
            consumed += len(tok)
            if val is not None:
                kept.append(min(0.0, float(val)))
        if fragment == raw and choice.get("finish_reason") == "stop":
            ends = True
        return Continuation(fragment, tuple(kept), math.fsum(kept), ends)

    def beam_continuations(self, state_text: str, config: PolicyConfig) -> list[Continuation]:
        if not state_text:
            raise ValueError("state_text must be nonempty")
        payload = {
            "prompt": state_text,
            "n": config.beam_width,
            "max_tokens": config.max_fragment_tokens,
            "temperature": config.decode_temperature,
            "stop": [";"],
            "logprobs": 1,
        }
        if self.native_beam:
            payload.update({"use_beam_search": True, "best_of": config.beam_width, "temperature": 0.0})
        data = self._post(payload)
        cands = [c for c in (self._to_continuation(ch) for ch in data.get("choices", [])) if c is not None]
        beam = _rank(cands, config.beam_width)
        if not beam:
            raise EmptyBeam("endpoint returned no usable continuation")
        return beam

    def greedy_continuation(self, state_text: str, config: PolicyConfig) -> Continuation:
        payload = {
            "prompt": state_text,
            "n": 1,
            "max_tokens": config.max_fragment_tokens,
            "temperature": 0.0,
            "stop": [";"],
            "logprobs": 1,
        }
        data = self._post(payload)
        cands = [c for c in (self._to_continuation(ch) for ch in data.get("choices", [])) if c is not None]
        if not cands:
            raise EmptyBeam("endpoint returned no usable continuation")
        return cands[0]

    def sequence_logprob(self, context: str, full_sql: str) -> float:
        if not full_sql:
            raise ValueError("full_sql must be nonempty")
        data = self._post({
            "prompt": context + full_sql,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 1,
            "temperature": 0.0,
        })
        try:
            lp = data["choices"][0]["logprobs"]
            offsets = lp["text_offset"]
            values = lp["token_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise UnscorableSequence(f"echo response lacks token logprobs: {exc}") from exc
        start = len(context)
        return math.fsum(float(v) for off, v in zip(offsets, values) if off >= start and v is not None)
