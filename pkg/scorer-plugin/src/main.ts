#!/usr/bin/env node
/**
 * Scorer plugin: line-delimited JSON over stdio.
 *
 * Handshake first, then for each request
 *   {"id": n, "query": "...", "candidates": ["...", ...]}
 * answer
 *   {"id": n, "scores": [cosine(query, candidate), ...]}
 * in request order.  Malformed requests get {"id", "error"} and the process
 * stays alive.
 */

import * as readline from "readline";

import { cosine, selectBackend } from "./embedding";

const PROTOCOL = "vulntrace-scorer";
const VERSION = 1;

function emit(obj: unknown): void {
  process.stdout.write(JSON.stringify(obj) + "\n");
}

interface ScoreRequest {
  id: number;
  query: string;
  candidates: string[];
}

function parseRequest(line: string): ScoreRequest {
  const raw = JSON.parse(line);
  if (typeof raw !== "object" || raw === null) {
    throw new Error("request must be a JSON object");
  }
  const { id, query, candidates } = raw as Record<string, unknown>;
  if (typeof id !== "number") throw new Error("request id must be a number");
  if (typeof query !== "string") throw new Error("query must be a string");
  if (!Array.isArray(candidates) || candidates.some((c) => typeof c !== "string")) {
    throw new Error("candidates must be an array of strings");
  }
  return { id, query, candidates: candidates as string[] };
}

async function main(): Promise<void> {
  let backend;
  try {
    backend = await selectBackend();
  } catch (err) {
    process.stderr.write(`cannot initialize embedding backend: ${err}\n`);
    process.exit(1);
  }

  emit({ protocol: PROTOCOL, version: VERSION });

  const rl = readline.createInterface({ input: process.stdin, terminal: false });
  // Strictly serial: each response is written before the next line is handled.
  let chain: Promise<void> = Promise.resolve();
  rl.on("line", (line) => {
    chain = chain.then(async () => {
      if (!line.trim()) return;
      let id: number | null = null;
      try {
        const request = parseRequest(line);
        id = request.id;
        const vectors = await backend.embed([request.query, ...request.candidates]);
        const queryVector = vectors[0]!;
        const scores = vectors.slice(1).map((v) => cosine(queryVector, v));
        emit({ id: request.id, scores });
      } catch (err) {
        emit({ id, error: String(err instanceof Error ? err.message : err) });
      }
    });
  });
  rl.on("close", () => {
    void chain.then(() => process.exit(0));
  });
}

void main();
