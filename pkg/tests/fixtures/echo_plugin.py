#!/usr/bin/env python3
"""Minimal conforming scorer plugin: score = shared lowercase token count."""
import json
import sys

print(json.dumps({"protocol": "vulntrace-scorer", "version": 1}), flush=True)

for line in sys.stdin:
    line = line.strip()
    if not line:
        continue
    try:
        request = json.loads(line)
        query_tokens = set(request["query"].lower().split())
        scores = [
            float(len(query_tokens & set(c.lower().split())))
            for c in request["candidates"]
        ]
        print(json.dumps({"id": request["id"], "scores": scores}), flush=True)
    except Exception as exc:  # malformed request: answer, stay alive
        print(json.dumps({"id": None, "error": str(exc)}), flush=True)
