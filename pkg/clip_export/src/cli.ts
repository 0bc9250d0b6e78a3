#!/usr/bin/env node
/**
 * clip-export --vocab <path> --sentences <path> --out <path>
 *             [--encoder clip|hashed]
 *
 * Encodes every vocabulary label and relationship sentence and writes a
 * LANGEMB1 embedding table. Exits nonzero on any failure (model load,
 * encoding, I/O).
 */

import { makeEncoder } from "./encoders.js";
import { exportTable } from "./export.js";

function parseArgs(argv: string[]): Map<string, string> {
  const args = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (!key.startsWith("--") || value === undefined) {
      throw new Error(`malformed arguments near "${key}"`);
    }
    args.set(key.slice(2), value);
  }
  return args;
}

async function main(): Promise<number> {
  let args: Map<string, string>;
  try {
    args = parseArgs(process.argv.slice(2));
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 2;
  }
  const vocab = args.get("vocab");
  const out = args.get("out");
  if (!vocab || !out) {
    console.error("usage: clip-export --vocab <path> --sentences <path> --out <path> [--encoder clip|hashed]");
    return 2;
  }
  try {
    const encoder = makeEncoder(args.get("encoder") ?? "clip");
    const table = await exportTable(
      { vocabPath: vocab, sentencesPath: args.get("sentences") ?? null, outPath: out },
      encoder
    );
    console.log(`wrote ${table.entries.size} entries (D=${table.dim}, ${table.provenance}) to ${out}`);
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

main().then((code) => {
  process.exitCode = code;
});
