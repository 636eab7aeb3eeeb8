/**
 * Sub-word tokenization shared by every embedding backend.
 *
 * Identifiers split at underscores, camelCase humps and letter/digit joints;
 * both the whole lowercased identifier and its sub-words are emitted so
 * natural-language queries can reach code-shaped candidates.
 */

const RAW_TOKEN = /[A-Za-z_][A-Za-z0-9_]*|\d+(?:\.\d+)*/g;
const CAMEL = /[A-Z]+(?=[A-Z][a-z0-9])|[A-Z]?[a-z]+|[A-Z]+|\d+/g;

export function subwordTokens(text: string): string[] {
  const out: string[] = [];
  for (const raw of text.match(RAW_TOKEN) ?? []) {
    if (/^\d/.test(raw)) {
      out.push(raw);
      continue;
    }
    out.push(raw.toLowerCase());
    const parts: string[] = [];
    for (const piece of raw.split("_")) {
      parts.push(...(piece.match(CAMEL) ?? []));
    }
    if (parts.length > 1) {
      out.push(...parts.map((p) => p.toLowerCase()));
    }
  }
  return out;
}
