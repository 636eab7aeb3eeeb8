"""Scorer plugin protocol: line-delimited JSON over a child process's stdio.

Handshake (first line the plugin writes):

    {"protocol": "vulntrace-scorer", "version": 1}

Request/response, one JSON object per line:

    -> {"id": 7, "query": "...", "candidates": ["...", "..."]}
    <- {"id": 7, "scores": [0.4, 0.1]}

A response must echo the request id and carry exactly one score per
candidate.  Anything else — bad handshake, mismatched id, wrong score count,
an {"id", "error"} response, or a dead pipe — raises ScorerUnavailable.

Run ``python -m vulntrace.plugins <command...>`` to check any plugin binary
for conformance.
"""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import sys
from typing import Sequence

from .errors import ScorerUnavailable

PROTOCOL_NAME = "vulntrace-scorer"
PROTOCOL_VERSION = 1

PLUGIN_ENV_VAR = "VULNTRACE_PLUGIN"


def resolve_plugin_command(cli_value: str | None) -> list[str] | None:
    """Plugin command from the environment override or the CLI flag."""
    raw = os.environ.get(PLUGIN_ENV_VAR) or cli_value
    if not raw:
        return None
    return shlex.split(raw) if isinstance(raw, str) else list(raw)


class PluginScorer:
    """Client for one plugin process; requests are serialized on its pipe."""

    def __init__(self, command: str | Sequence[str]):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self._argv = argv
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
            )
        except OSError as exc:
            raise ScorerUnavailable(f"cannot start plugin {argv!r}: {exc}") from exc
        self._next_id = 0
        try:
            self._handshake()
        except ScorerUnavailable:
            self.close()
            raise

    def _read_line(self) -> str:
        assert self._proc.stdout is not None
        line = self._proc.stdout.readline()
        if not line:
            raise ScorerUnavailable(f"plugin {self._argv!r} closed its output stream")
        return line

    def _handshake(self) -> None:
        line = self._read_line()
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScorerUnavailable(f"plugin handshake is not JSON: {line!r}") from exc
        if doc.get("protocol") != PROTOCOL_NAME or doc.get("version") != PROTOCOL_VERSION:
            raise ScorerUnavailable(f"plugin handshake mismatch: {doc!r}")

    def score_pool(self, query: str, pool_contents: Sequence[str]) -> list[float]:
        request_id = self._next_id
        self._next_id += 1
        request = {"id": request_id, "query": query, "candidates": list(pool_contents)}
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(json.dumps(request) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ScorerUnavailable(f"plugin {self._argv!r} pipe broke: {exc}") from exc
        line = self._read_line()
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScorerUnavailable(f"plugin response is not JSON: {line!r}") from exc
        if response.get("id") != request_id:
            raise ScorerUnavailable(
                f"plugin answered id {response.get('id')!r} to request {request_id}"
            )
        if "error" in response:
            raise ScorerUnavailable(f"plugin error: {response['error']}")
        scores = response.get("scores")
        if not isinstance(scores, list) or len(scores) != len(pool_contents):
            raise ScorerUnavailable(
                f"plugin returned {len(scores) if isinstance(scores, list) else 'no'} "
                f"scores for {len(pool_contents)} candidates"
            )
        out = [float(s) for s in scores]
        if any(s != s or s in (float("inf"), float("-inf")) for s in out):
            raise ScorerUnavailable("plugin returned a non-finite score")
        return out

    def close(self) -> None:
        if self._proc.poll() is None:
            if self._proc.stdin is not None:
                try:
                    self._proc.stdin.close()
                except OSError:
                    pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self) -> "PluginScorer":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def check_conformance(command: str | Sequence[str]) -> list[tuple[str, bool, str]]:
    """Battery of protocol checks against a plugin; (name, passed, detail) rows."""
    results: list[tuple[str, bool, str]] = []

    def run_battery(scorer: PluginScorer) -> None:
        scores = scorer.score_pool("bounds check", ["bounds_check(s)", "unrelated();"])
        results.append(("response_lengths_match", len(scores) == 2, f"{len(scores)} scores for 2 candidates"))
        empty = scorer.score_pool("anything", [])
        results.append(("empty_candidates_ok", empty == [], f"got {empty!r}"))
        again = scorer.score_pool("bounds check", ["bounds_check(s)", "unrelated();"])
        results.append(("ids_tracked_across_requests", len(again) == 2, "second request answered"))

    probe = ("alpha beta gamma", ["alpha beta delta", "beta gamma", "unrelated"])
    try:
        with PluginScorer(command) as scorer:
            results.append(("handshake", True, "protocol/version accepted"))
            run_battery(scorer)
            first = scorer.score_pool(*probe)
        with PluginScorer(command) as scorer:
            scorer.score_pool("bounds check", ["bounds_check(s)", "unrelated();"])
            scorer.score_pool("anything", [])
            scorer.score_pool("bounds check", ["bounds_check(s)", "unrelated();"])
            second = scorer.score_pool(*probe)
        results.append(
            ("deterministic_across_runs", first == second, f"{first} vs {second}")
        )
    except ScorerUnavailable as exc:
        results.append(("protocol", False, str(exc)))
    return results


def main(argv: Sequence[str] | None = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args:
        print("usage: python -m vulntrace.plugins <plugin-command...>", file=sys.stderr)
        return 2
    results = check_conformance(args)
    ok = True
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok = ok and passed
    return 0 if ok else 3


if __name__ == "__main__":
    raise SystemExit(main())
