/**
 * Batch export: vocabulary labels plus relationship sentences go through a
 * text encoder and land in a LANGEMB1 table, vectors L2-normalized so the
 * consumer only ever deals in cosines.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { TextEncoder } from "./encoders.js";
import { EmbeddingTable, encodeTable } from "./format.js";

export interface ExportManifest {
  vocabPath: string;
  sentencesPath: string | null;
  outPath: string;
}

export interface Vocabulary {
  object_labels: string[];
  predicate_labels: string[];
}

export function loadVocabulary(path: string): Vocabulary {
  const doc = JSON.parse(readFileSync(path, "utf-8"));
  if (!Array.isArray(doc.object_labels) || !Array.isArray(doc.predicate_labels)) {
    throw new Error(`${path}: expected object_labels and predicate_labels arrays`);
  }
  if (!doc.predicate_labels.includes("and")) {
    throw new Error(`${path}: predicate vocabulary must contain "and"`);
  }
  return doc as Vocabulary;
}

export function loadSentences(path: string): string[] {
  return readFileSync(path, "utf-8")
    .split("\n")
    .map((line) => line.trim())
    .filter((line) => line.length > 0);
}

/** Prompts in canonical order (objects, predicates, sentences), deduplicated. */
export function collectPrompts(vocab: Vocabulary, sentences: string[]): string[] {
  const seen = new Set<string>();
  const prompts: string[] = [];
  for (const p of [...vocab.object_labels, ...vocab.predicate_labels, ...sentences]) {
    if (!seen.has(p)) {
      seen.add(p);
      prompts.push(p);
    }
  }
  return prompts;
}

export async function exportTable(manifest: ExportManifest, encoder: TextEncoder): Promise<EmbeddingTable> {
  const vocab = loadVocabulary(manifest.vocabPath);
  const sentences = manifest.sentencesPath ? loadSentences(manifest.sentencesPath) : [];
  const prompts = collectPrompts(vocab, sentences);
  const vectors = await encoder.encode(prompts);
  const entries = new Map<string, Float32Array>();
  prompts.forEach((p, i) => entries.set(p, vectors[i]));
  const table: EmbeddingTable = { dim: encoder.dim, entries, provenance: encoder.provenance };
  writeFileSync(manifest.outPath, encodeTable(table));
  return table;
}
