/**
 * CEB1 binary format: concept embeddings as one flat little-endian file.
 *
 * Layout: magic "CEB1", u32 K, u32 M, u32 D, then K class names (u32 byte
 * length + UTF-8), then K*M*D float32 values in class-major, prompt-major,
 * dimension-major order.
 */

export const CEB1_MAGIC = "CEB1";

export class Ceb1Error extends Error {}

export interface Ceb1File {
  classNames: string[];
  numPrompts: number;
  dim: number;
  /** length K*M*D, class-major */
  values: Float32Array;
}

export function writeCeb1(
  classNames: string[],
  numPrompts: number,
  dim: number,
  values: Float32Array
): Buffer {
  const k = classNames.length;
  if (k < 1) throw new Ceb1Error("need at least one class");
  if (numPrompts < 2) throw new Ceb1Error(`need at least 2 prompts, got ${numPrompts}`);
  if (dim < 1) throw new Ceb1Error(`embedding dim must be positive, got ${dim}`);
  if (values.length !== k * numPrompts * dim) {
    throw new Ceb1Error(
      `expected ${k * numPrompts * dim} values for K=${k}, M=${numPrompts}, D=${dim}, got ${values.length}`
    );
  }
  for (let i = 0; i < values.length; i++) {
    if (!Number.isFinite(values[i])) throw new Ceb1Error(`non-finite value at index ${i}`);
  }

  const nameBufs = classNames.map((n) => Buffer.from(n, "utf-8"));
  let size = 4 + 12;
  for (const nb of nameBufs) size += 4 + nb.length;
  size += values.length * 4;

  const buf = Buffer.alloc(size);
  let off = 0;
  off += buf.write(CEB1_MAGIC, off, "ascii");
  off = buf.writeUInt32LE(k, off);
  off = buf.writeUInt32LE(numPrompts, off);
  off = buf.writeUInt32LE(dim, off);
  for (const nb of nameBufs) {
    off = buf.writeUInt32LE(nb.length, off);
    off += nb.copy(buf, off);
  }
  for (let i = 0; i < values.length; i++) {
    off = buf.writeFloatLE(values[i], off);
  }
  return buf;
}

export function readCeb1(buf: Buffer): Ceb1File {
  if (buf.length < 16 || buf.toString("ascii", 0, 4) !== CEB1_MAGIC) {
    throw new Ceb1Error("not a CEB1 file");
  }
  let off = 4;
  const k = buf.readUInt32LE(off);
  const m = buf.readUInt32LE(off + 4);
  const d = buf.readUInt32LE(off + 8);
  off += 12;
  const classNames: string[] = [];
  for (let i = 0; i < k; i++) {
    if (off + 4 > buf.length) throw new Ceb1Error("truncated class name table");
    const len = buf.readUInt32LE(off);
    off += 4;
    if (off + len > buf.length) throw new Ceb1Error("truncated class name");
    classNames.push(buf.toString("utf-8", off, off + len));
    off += len;
  }
  const count = k * m * d;
  if (buf.length - off !== count * 4) {
    throw new Ceb1Error(`payload is ${buf.length - off} bytes, expected ${count * 4}`);
  }
  const values = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    values[i] = buf.readFloatLE(off + i * 4);
  }
  return { classNames, numPrompts: m, dim: d, values };
}
