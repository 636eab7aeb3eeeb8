import { describe, expect, it } from "vitest";

import { HashingBackend, cosine, hashingEmbed } from "../src/embedding";
import { subwordTokens } from "../src/tokenize";

function norm(v: number[]): number {
  return Math.sqrt(v.reduce((s, x) => s + x * x, 0));
}

// deterministic PRNG so the property sweep is reproducible
function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

describe("subwordTokens", () => {
  it("splits identifiers and keeps the whole form", () => {
    const toks = subwordTokens("bounds_check_name_len(s)");
    expect(toks).toContain("bounds_check_name_len");
    expect(toks).toContain("bounds");
    expect(toks).toContain("check");
    expect(toks).toContain("len");
  });

  it("splits camelCase humps", () => {
    const toks = subwordTokens("getBufferSize");
    expect(toks).toContain("getbuffersize");
    expect(toks).toContain("buffer");
  });
});

describe("hashingEmbed", () => {
  it("returns unit-norm vectors for non-empty text", () => {
    for (const text of ["bounds check", "ND_TCHECK2(*s, 1);", "a"]) {
      expect(Math.abs(norm(hashingEmbed(text, 512)) - 1)).toBeLessThan(1e-6);
    }
  });

  it("embeds empty text as the zero vector", () => {
    const v = hashingEmbed("", 512);
    expect(norm(v)).toBe(0);
    expect(cosine(v, hashingEmbed("anything", 512))).toBe(0);
  });

  it("is scale invariant over token repetition", () => {
    const once = hashingEmbed("abc", 512);
    const twice = hashingEmbed("abc abc", 512);
    expect(Math.abs(cosine(once, twice) - 1)).toBeLessThan(1e-9);
  });

  it("is deterministic", () => {
    expect(hashingEmbed("advance_pointer_by_length(s, buffer)", 512)).toEqual(
      hashingEmbed("advance_pointer_by_length(s, buffer)", 512),
    );
  });

  it("keeps pairwise cosines within [-1, 1] on a random sweep", () => {
    const rand = mulberry32(42);
    const alphabet = "abcdefghij_XYZ0123 ";
    const texts: string[] = [];
    for (let i = 0; i < 100; i++) {
      let s = "";
      const len = 1 + Math.floor(rand() * 30);
      for (let j = 0; j < len; j++) {
        s += alphabet[Math.floor(rand() * alphabet.length)];
      }
      texts.push(s);
    }
    const vectors = texts.map((t) => hashingEmbed(t, 256));
    for (let i = 0; i < vectors.length; i++) {
      for (let j = i + 1; j < vectors.length; j++) {
        const c = cosine(vectors[i]!, vectors[j]!);
        expect(c).toBeGreaterThanOrEqual(-1 - 1e-9);
        expect(c).toBeLessThanOrEqual(1 + 1e-9);
      }
    }
  });

  it("scores overlapping texts above unrelated ones", () => {
    const query = hashingEmbed("add a bounds check in name_len()", 512);
    const related = hashingEmbed("bounds_check_name_len(s, maxbuf);", 512);
    const unrelated = hashingEmbed("q->flags |= DONE;", 512);
    expect(cosine(query, related)).toBeGreaterThan(cosine(query, unrelated));
  });
});

describe("HashingBackend", () => {
  it("batches and matches the single-text function", async () => {
    const backend = new HashingBackend(128);
    const [a, b] = await backend.embed(["alpha beta", "gamma"]);
    expect(a).toEqual(hashingEmbed("alpha beta", 128));
    expect(b).toEqual(hashingEmbed("gamma", 128));
  });
});
