/**
 * Text encoders producing unit-norm embedding vectors.
 *
 * The default is the CLIP ViT-B/32 text tower (D=512) loaded through
 * transformers.js; weights come from the local cache or a download. The
 * "hashed" encoder is a deterministic offline stand-in with the same output
 * contract, for environments without model access.
 */

import { createHash } from "node:crypto";
import { l2Normalize } from "./format.js";

export interface TextEncoder {
  readonly dim: number;
  readonly provenance: string;
  encode(prompts: string[]): Promise<Float32Array[]>;
}

/** mulberry32 PRNG; tiny, seedable, reproducible across platforms. */
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

export class HashedEncoder implements TextEncoder {
  readonly dim: number;
  readonly provenance = "hashed";

  constructor(dim = 512) {
    this.dim = dim;
  }

  private embedOne(prompt: string): Float32Array {
    const digest = createHash("sha256").update(prompt, "utf-8").digest();
    const rand = mulberry32(digest.readUInt32LE(0) ^ digest.readUInt32LE(4));
    const v = new Float32Array(this.dim);
    for (let i = 0; i < this.dim; i += 2) {
      // Box-Muller transform; guard against log(0)
      const u1 = Math.max(rand(), 1e-12);
      const u2 = rand();
      const r = Math.sqrt(-2 * Math.log(u1));
      v[i] = r * Math.cos(2 * Math.PI * u2);
      if (i + 1 < this.dim) v[i + 1] = r * Math.sin(2 * Math.PI * u2);
    }
    return l2Normalize(v);
  }

  async encode(prompts: string[]): Promise<Float32Array[]> {
    return prompts.map((p) => this.embedOne(p));
  }
}

export class ClipTextEncoder implements TextEncoder {
  readonly dim = 512;
  readonly provenance: string;
  private readonly modelId: string;
  private pipe: { tokenizer: any; model: any } | null = null;

  constructor(modelId = "Xenova/clip-vit-base-patch32") {
    this.modelId = modelId;
    this.provenance = `clip-vit-b32:${modelId}`;
  }

  private async load() {
    if (this.pipe) return this.pipe;
    try {
      const { AutoTokenizer, CLIPTextModelWithProjection } = await import("@xenova/transformers");
      const tokenizer = await AutoTokenizer.from_pretrained(this.modelId);
      const model = await CLIPTextModelWithProjection.from_pretrained(this.modelId, { quantized: false });
      this.pipe = { tokenizer, model };
      return this.pipe;
    } catch (err) {
      throw new Error(
        `failed to load text encoder "${this.modelId}" (weights cached or downloadable?); ` +
          `use --encoder hashed for an offline table. Cause: ${(err as Error).message}`
      );
    }
  }

  async encode(prompts: string[]): Promise<Float32Array[]> {
    const { tokenizer, model } = await this.load();
    const out: Float32Array[] = [];
    const batchSize = 32;
    for (let start = 0; start < prompts.length; start += batchSize) {
      const batch = prompts.slice(start, start + batchSize);
      const inputs = tokenizer(batch, { padding: true, truncation: true });
      const { text_embeds } = await model(inputs);
      const [rows, dim] = text_embeds.dims;
      if (dim !== this.dim) throw new Error(`encoder produced D=${dim}, expected ${this.dim}`);
      const data = text_embeds.data as Float32Array;
      for (let r = 0; r < rows; r++) {
        out.push(l2Normalize(data.slice(r * dim, (r + 1) * dim)));
      }
    }
    return out;
  }
}

export function makeEncoder(kind: string): TextEncoder {
  if (kind === "clip") return new ClipTextEncoder();
  if (kind === "hashed") return new HashedEncoder();
  throw new Error(`unknown encoder "${kind}" (expected "clip" or "hashed")`);
}
