"""HTTP clients for the three external services.

Covers OpenAI-compatible chat completion backends, the Lean
verification server (proof checking plus AST export), and the theorem
search service. All clients retry transient failures (network errors,
HTTP 408/429/5xx) with exponential backoff and full jitter, keep total
requests within 1 + retry budget, and map failures onto the shared
exception hierarchy.
"""

from __future__ import annotations

import random
import re
import threading
import time
import uuid
from dataclasses import dataclass

import requests

from .ast_model import AstNode, SorryInfo, parse_ast
from .errors import (
    AstExportFailed,
    BadResponse,
    InvalidModuleName,
    RemoteExhausted,
    ServiceUnavailable,
)

_MODULE_NAME_RE = re.compile(r"^[A-Za-z0-9_.]+$")
_TRANSIENT_STATUS = frozenset({408, 429})

Span = tuple[tuple[int, int], tuple[int, int]]


@dataclass(frozen=True)
class ChatBackendConfig:
    """One agent's chat-completion backend."""

    model: str
    base_url: str
    api_key: str = ""
    max_tokens: int = 50000
    context_window: int | None = None
    max_remote_retries: int = 5


@dataclass(frozen=True)
class LeanError:
    message: str
    span: Span | None = None


@dataclass(frozen=True)
class VerificationResult:
    """Outcome of one verification request."""

    passed: bool
    complete: bool
    errors: tuple[LeanError, ...] = ()
    time: float = 0.0


@dataclass(frozen=True)
class TheoremHit:
    full_name: str
    statement: str
    source_package: str
    score: float


@dataclass(frozen=True)
class VerifierConfig:
    url: str
    verify_path: str = "/api/check"
    max_retries: int = 5


@dataclass(frozen=True)
class SearchConfig:
    url: str
    package_filters: tuple[str, ...] = ("Mathlib", "Batteries", "Std", "Init", "Lean")
    max_retries: int = 5
    hint_cap: int = 20


def _is_transient_status(status: int) -> bool:
    return status in _TRANSIENT_STATUS or status >= 500


class _RetryingHttp:
    """Shared retry loop: at most 1 + budget requests, backoff with full jitter."""

    def __init__(self, retries: int, backoff_base: float = 1.0, sleeper=time.sleep):
        self._retries = max(0, retries)
        self._backoff_base = backoff_base
        self._sleep = sleeper

    def request(self, method: str, url: str, **kwargs) -> requests.Response:
        last_reason = "no request attempted"
        for attempt in range(self._retries + 1):
            if attempt:
                self._sleep(random.uniform(0, self._backoff_base * 2 ** (attempt - 1)))
            try:
                response = requests.request(method, url, **kwargs)
            except requests.RequestException as exc:
                last_reason = f"network error: {exc}"
                continue
            if _is_transient_status(response.status_code):
                last_reason = f"HTTP {response.status_code}"
                continue
            return response
        raise ServiceUnavailable(
            f"{method} {url} failed after {self._retries + 1} attempts ({last_reason})"
        )


class ChatClient:
    """Client for one OpenAI-compatible chat completion endpoint."""

    def __init__(
        self,
        config: ChatBackendConfig,
        request_timeout: float = 600.0,
        backoff_base: float = 1.0,
        sleeper=time.sleep,
    ):
        self.config = config
        self._request_timeout = request_timeout
        self._http = _RetryingHttp(config.max_remote_retries, backoff_base, sleeper)

    def complete(self, messages: list[tuple[str, str]]) -> str:
        """
        Send a conversation, return the first choice's assistant text.

        Raises RemoteExhausted when the retry budget is spent on
        transient failures and BadResponse on anything structurally
        wrong (non-transient HTTP errors, missing choices).
        """
        if not messages:
            raise ValueError("messages must be non-empty")
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        payload = {
            "model": self.config.model,
            "messages": [{"role": role, "content": content} for role, content in messages],
            "max_tokens": self.config.max_tokens,
        }
        try:
            response = self._http.request(
                "POST", url, json=payload, headers=headers, timeout=self._request_timeout
            )
        except ServiceUnavailable as exc:
            raise RemoteExhausted(str(exc)) from exc
        if response.status_code >= 400:
            raise BadResponse(f"chat backend returned HTTP {response.status_code}: {response.text[:200]}")
        try:
            body = response.json()
            choices = body["choices"]
            content = choices[0]["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise BadResponse(f"chat response missing choices: {exc}") from exc
        if not isinstance(content, str):
            raise BadResponse("chat response content is not text")
        return content


class VerifierClient:
    """Client for the Lean verification server's check and AST endpoints."""

    def __init__(
        self,
        config: VerifierConfig,
        max_concurrent: int | None = None,
        backoff_base: float = 1.0,
        sleeper=time.sleep,
    ):
        self.config = config
        self._http = _RetryingHttp(config.max_retries, backoff_base, sleeper)
        self._semaphore = threading.BoundedSemaphore(max_concurrent) if max_concurrent else None

    def _post(self, path: str, payload: dict, timeout: float) -> dict:
        url = self.config.url.rstrip("/") + path
        if self._semaphore:
            with self._semaphore:
                response = self._http.request("POST", url, json=payload, timeout=timeout + 30)
        else:
            response = self._http.request("POST", url, json=payload, timeout=timeout + 30)
        if response.status_code >= 400:
            raise BadResponse(f"{path} returned HTTP {response.status_code}: {response.text[:200]}")
        try:
            return response.json()
        except ValueError as exc:
            raise BadResponse(f"{path} returned non-JSON body") from exc

    @staticmethod
    def _parse_result(entry: dict) -> VerificationResult:
        errors: list[LeanError] = []
        saw_error = False
        saw_incomplete = False
        for diag in entry.get("diagnostics", []):
            severity = diag.get("severity", "error")
            message = diag.get("message", "")
            span = None
            pos = diag.get("pos")
            if isinstance(pos, dict):
                end = diag.get("endPos") or pos
                span = (
                    (int(pos.get("line", 1)), int(pos.get("column", 1))),
                    (int(end.get("line", pos.get("line", 1))), int(end.get("column", pos.get("column", 1)))),
                )
            if severity == "error":
                saw_error = True
                errors.append(LeanError(message=message, span=span))
            elif "sorry" in message or "admit" in message:
                saw_incomplete = True
        if entry.get("error"):
            saw_error = True
            errors.append(LeanError(message=str(entry["error"])))
        passed = not saw_error
        return VerificationResult(
            passed=passed,
            complete=passed and not saw_incomplete,
            errors=tuple(errors),
            time=float(entry.get("time", 0.0)),
        )

    def verify_code(self, code: str, timeout: float = 300.0) -> VerificationResult:
        """
        Check one Lean unit. ``passed`` means no errors; ``complete``
        additionally means no sorry/admit warnings (a valid sketch is
        passed but not complete).
        """
        return self.verify_batch([code], timeout)[0]

    def verify_batch(self, codes: list[str], timeout: float = 300.0) -> list[VerificationResult]:
        """Check several units in one request, preserving input order."""
        ids = [f"code-{uuid.uuid4().hex[:8]}-{i}" for i in range(len(codes))]
        payload = {
            "codes": [{"custom_id": cid, "code": code} for cid, code in zip(ids, codes)],
            "timeout": timeout,
        }
        body = self._post(self.config.verify_path, payload, timeout)
        by_id: dict[str, dict] = {}
        for entry in body.get("results", []):
            if isinstance(entry, dict) and "custom_id" in entry:
                by_id[entry["custom_id"]] = entry
        results = []
        for cid in ids:
            entry = by_id.get(cid)
            if entry is None:
                raise BadResponse(f"verification response missing result for {cid}")
            results.append(self._parse_result(entry))
        return results


class AstClient:
    """Client for the verification server's AST export endpoints."""

    def __init__(self, config: VerifierConfig, backoff_base: float = 1.0, sleeper=time.sleep):
        self.config = config
        self._http = _RetryingHttp(config.max_retries, backoff_base, sleeper)

    def _post(self, path: str, payload: dict, timeout: float) -> dict:
        url = self.config.url.rstrip("/") + path
        response = self._http.request("POST", url, json=payload, timeout=timeout + 30)
        if response.status_code >= 400:
            raise BadResponse(f"{path} returned HTTP {response.status_code}: {response.text[:200]}")
        try:
            return response.json()
        except ValueError as exc:
            raise BadResponse(f"{path} returned non-JSON body") from exc

    def fetch_ast(
        self, code: str, module_name: str = "User.Code", timeout: float = 300.0
    ) -> tuple[AstNode, list[SorryInfo]]:
        """
        Export the AST of arbitrary Lean code.

        The module name is validated against ``[A-Za-z0-9_.]+`` before
        leaving the process, preventing path traversal on the server.
        Raises AstExportFailed when the service reports a compile error.
        """
        if not _MODULE_NAME_RE.match(module_name):
            raise InvalidModuleName(f"module name {module_name!r} must match [A-Za-z0-9_.]+")
        body = self._post(
            "/api/ast_code", {"code": code, "module_name": module_name, "timeout": timeout}, timeout
        )
        if body.get("error"):
            raise AstExportFailed(str(body["error"]))
        return parse_ast({"ast": body.get("ast"), "sorries": body.get("sorries", [])})

    def fetch_module_ast(self, modules: list[str], one: bool = True, timeout: float = 300.0) -> dict:
        """Export ASTs of installed library modules (raw payload passthrough)."""
        for module in modules:
            if not _MODULE_NAME_RE.match(module):
                raise InvalidModuleName(f"module name {module!r} must match [A-Za-z0-9_.]+")
        return self._post("/api/ast", {"modules": modules, "one": one, "timeout": timeout}, timeout)


class SearchClient:
    """Client for the theorem search service backing sketch retrieval."""

    def __init__(self, config: SearchConfig, backoff_base: float = 1.0, sleeper=time.sleep):
        self.config = config
        self._http = _RetryingHttp(config.max_retries, backoff_base, sleeper)

    def search_theorems(self, queries: list[str]) -> list[TheoremHit]:
        """
        Run every query, merge hits deduplicated by full name (keeping
        the best score), filter to the configured packages, and return
        them sorted by descending score, capped at the hint cap.
        """
        if not queries:
            raise ValueError("queries must be non-empty")
        allowed = set(self.config.package_filters)
        best: dict[str, TheoremHit] = {}
        for query in queries:
            url = self.config.url.rstrip("/") + "/search"
            response = self._http.request(
                "GET",
                url,
                params={"q": query, "pkg": ",".join(self.config.package_filters)},
                timeout=60,
            )
            if response.status_code >= 400:
                raise BadResponse(f"search returned HTTP {response.status_code}")
            try:
                results = response.json().get("results", [])
            except ValueError as exc:
                raise BadResponse("search returned non-JSON body") from exc
            for raw in results:
                try:
                    hit = TheoremHit(
                        full_name=raw["full_name"],
                        statement=raw.get("statement", ""),
                        source_package=raw.get("package", ""),
                        score=float(raw.get("score", 0.0)),
                    )
                except (KeyError, TypeError, ValueError):
                    continue
                if allowed and hit.source_package not in allowed:
                    continue
                known = best.get(hit.full_name)
                if known is None or hit.score > known.score:
                    best[hit.full_name] = hit
        ranked = sorted(best.values(), key=lambda h: (-h.score, h.full_name))
        return ranked[: self.config.hint_cap]
