/**
 * LANGEMB1 binary table: magic "LANGEMB1", uint32 LE entry count, uint32 LE
 * dimension, then per entry a uint16 LE UTF-8 byte length, the prompt bytes
 * and D float32 LE values. An optional trailing record (uint16 LE length +
 * UTF-8 bytes) carries the provenance tag.
 */

const MAGIC = Buffer.from("LANGEMB1", "ascii");

export interface EmbeddingTable {
  dim: number;
  entries: Map<string, Float32Array>;
  provenance: string;
}

export function l2Normalize(v: Float32Array): Float32Array {
  let sq = 0;
  for (let i = 0; i < v.length; i++) sq += v[i] * v[i];
  const norm = Math.sqrt(sq);
  if (norm === 0) throw new Error("cannot normalize a zero vector");
  const out = new Float32Array(v.length);
  for (let i = 0; i < v.length; i++) out[i] = v[i] / norm;
  return out;
}

export function encodeTable(table: EmbeddingTable): Buffer {
  const chunks: Buffer[] = [MAGIC];
  const header = Buffer.alloc(8);
  header.writeUInt32LE(table.entries.size, 0);
  header.writeUInt32LE(table.dim, 4);
  chunks.push(header);
  for (const [prompt, vec] of table.entries) {
    if (vec.length !== table.dim) {
      throw new Error(`entry "${prompt}" has dimension ${vec.length}, expected ${table.dim}`);
    }
    const name = Buffer.from(prompt, "utf-8");
    const len = Buffer.alloc(2);
    len.writeUInt16LE(name.length, 0);
    const data = Buffer.alloc(vec.length * 4);
    for (let i = 0; i < vec.length; i++) data.writeFloatLE(vec[i], i * 4);
    chunks.push(len, name, data);
  }
  const prov = Buffer.from(table.provenance, "utf-8");
  const provLen = Buffer.alloc(2);
  provLen.writeUInt16LE(prov.length, 0);
  chunks.push(provLen, prov);
  return Buffer.concat(chunks);
}

export function decodeTable(raw: Buffer): EmbeddingTable {
  if (raw.length < 16 || !raw.subarray(0, 8).equals(MAGIC)) {
    throw new Error("bad LANGEMB1 magic");
  }
  const count = raw.readUInt32LE(8);
  const dim = raw.readUInt32LE(12);
  let offset = 16;
  const entries = new Map<string, Float32Array>();
  for (let e = 0; e < count; e++) {
    const nameLen = raw.readUInt16LE(offset);
    offset += 2;
    const prompt = raw.subarray(offset, offset + nameLen).toString("utf-8");
    offset += nameLen;
    const vec = new Float32Array(dim);
    for (let i = 0; i < dim; i++) vec[i] = raw.readFloatLE(offset + i * 4);
    offset += dim * 4;
    entries.set(prompt, vec);
  }
  let provenance = "unknown";
  if (offset < raw.length) {
    const provLen = raw.readUInt16LE(offset);
    offset += 2;
    provenance = raw.subarray(offset, offset + provLen).toString("utf-8");
    offset += provLen;
  }
  if (offset !== raw.length) throw new Error("trailing bytes in LANGEMB1 file");
  return { dim, entries, provenance };
}
