/**
 * Embedding backends.
 *
 * The default backend feature-hashes sub-word tokens into a fixed-dimension
 * vector and L2-normalizes it: fully offline, bit-for-bit deterministic, no
 * model downloads.  A real model backend can be swapped in with
 * VULNTRACE_EMBED_BACKEND=module plus VULNTRACE_EMBED_MODULE=<path> naming a
 * module that exports `embed(texts: string[]): Promise<number[][]>`.
 */

import * as crypto from "crypto";

import { subwordTokens } from "./tokenize";

export interface EmbeddingBackend {
  name: string;
  dim: number;
  embed(texts: string[]): Promise<number[][]>;
}

function hashToken(token: string): number {
  const digest = crypto.createHash("sha256").update(token).digest();
  // first 4 bytes as a signed 32-bit integer
  return (
    ((digest[0]! << 24) | (digest[1]! << 16) | (digest[2]! << 8) | digest[3]!) | 0
  );
}

export function hashingEmbed(text: string, dim: number): number[] {
  const vector = new Array<number>(dim).fill(0);
  for (const token of subwordTokens(text)) {
    const h = hashToken(token);
    const index = Math.abs(h) % dim;
    vector[index] += h >= 0 ? 1 : -1;
  }
  let norm = 0;
  for (const v of vector) norm += v * v;
  norm = Math.sqrt(norm);
  if (norm === 0) return vector; // empty text embeds to the zero vector
  return vector.map((v) => v / norm);
}

export class HashingBackend implements EmbeddingBackend {
  readonly name = "hashing";
  readonly dim: number;

  constructor(dim = 512) {
    this.dim = dim;
  }

  async embed(texts: string[]): Promise<number[][]> {
    return texts.map((t) => hashingEmbed(t, this.dim));
  }
}

export function cosine(a: number[], b: number[]): number {
  let dot = 0;
  let na = 0;
  let nb = 0;
  for (let i = 0; i < a.length; i++) {
    dot += a[i]! * b[i]!;
    na += a[i]! * a[i]!;
    nb += b[i]! * b[i]!;
  }
  if (na === 0 || nb === 0) return 0; // zero vector scores 0 against anything
  return dot / (Math.sqrt(na) * Math.sqrt(nb));
}

class ModuleBackend implements EmbeddingBackend {
  readonly name: string;
  readonly dim: number;
  private readonly fn: (texts: string[]) => Promise<number[][]>;

  private constructor(name: string, dim: number, fn: ModuleBackend["fn"]) {
    this.name = name;
    this.dim = dim;
    this.fn = fn;
  }

  static async load(modulePath: string): Promise<ModuleBackend> {
    const mod = await import(modulePath);
    if (typeof mod.embed !== "function") {
      throw new Error(`module ${modulePath} does not export embed()`);
    }
    const probe: number[][] = await mod.embed(["probe"]);
    return new ModuleBackend(`module:${modulePath}`, probe[0]!.length, mod.embed);
  }

  async embed(texts: string[]): Promise<number[][]> {
    return this.fn(texts);
  }
}

export async function selectBackend(env = process.env): Promise<EmbeddingBackend> {
  const choice = env.VULNTRACE_EMBED_BACKEND ?? "hashing";
  if (choice === "hashing") {
    return new HashingBackend();
  }
  if (choice === "module") {
    const modulePath = env.VULNTRACE_EMBED_MODULE;
    if (!modulePath) {
      throw new Error("VULNTRACE_EMBED_BACKEND=module requires VULNTRACE_EMBED_MODULE");
    }
    return ModuleBackend.load(modulePath);
  }
  throw new Error(`unknown embedding backend ${choice}`);
}
