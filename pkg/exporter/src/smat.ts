// SMAT binary format: magic "SMAT", version u16=1, flags u16 (bit0 = rows
// L2-normalized), rows u32, dim u32, little-endian, then rows*dim float32
// row-major. Sidecar <stem>.ids holds one UTF-8 id per line, line i = row i.
// Must stay byte-compatible with the engine's reader.

import { promises as fs } from 'fs';

export const SMAT_MAGIC = 0x54414d53; // "SMAT" read as LE u32
export const SMAT_VERSION = 1;
export const FLAG_NORMALIZED = 0x1;
const HEADER_BYTES = 16;

export interface Matrix {
  rows: number;
  dim: number;
  data: Float32Array; // length rows*dim, row-major
  normalized: boolean;
}

export function encodeSmat(matrix: Matrix): Buffer {
  const { rows, dim, data, normalized } = matrix;
  if (data.length !== rows * dim) {
    throw new Error(`data length ${data.length} != rows*dim ${rows * dim}`);
  }
  for (let i = 0; i < data.length; i++) {
    if (!Number.isFinite(data[i])) {
      throw new Error(`non-finite value at index ${i}`);
    }
  }
  const buffer = Buffer.alloc(HEADER_BYTES + rows * dim * 4);
  buffer.writeUInt32LE(SMAT_MAGIC, 0);
  buffer.writeUInt16LE(SMAT_VERSION, 4);
  buffer.writeUInt16LE(normalized ? FLAG_NORMALIZED : 0, 6);
  buffer.writeUInt32LE(rows, 8);
  buffer.writeUInt32LE(dim, 12);
  for (let i = 0; i < data.length; i++) {
    buffer.writeFloatLE(data[i], HEADER_BYTES + i * 4);
  }
  return buffer;
}

export function decodeSmat(blob: Buffer): Matrix {
  if (blob.length < HEADER_BYTES) throw new Error('file too short for a SMAT header');
  if (blob.readUInt32LE(0) !== SMAT_MAGIC) throw new Error('bad magic');
  if (blob.readUInt16LE(4) !== SMAT_VERSION) throw new Error('unsupported version');
  const flags = blob.readUInt16LE(6);
  const rows = blob.readUInt32LE(8);
  const dim = blob.readUInt32LE(12);
  const expected = rows * dim * 4;
  if (blob.length - HEADER_BYTES !== expected) {
    throw new Error(`payload is ${blob.length - HEADER_BYTES} bytes, expected ${expected}`);
  }
  const data = new Float32Array(rows * dim);
  for (let i = 0; i < data.length; i++) {
    data[i] = blob.readFloatLE(HEADER_BYTES + i * 4);
  }
  return { rows, dim, data, normalized: (flags & FLAG_NORMALIZED) !== 0 };
}

export function idsPathFor(smatPath: string): string {
  return smatPath.replace(/\.smat$/, '') + '.ids';
}

export async function writeSmat(path: string, matrix: Matrix, ids: string[]): Promise<void> {
  if (ids.length !== matrix.rows) {
    throw new Error(`got ${ids.length} ids for ${matrix.rows} rows`);
  }
  for (const id of ids) {
    if (!id || /[\t\r\n]/.test(id)) throw new Error(`bad id ${JSON.stringify(id)}`);
  }
  await fs.writeFile(path, encodeSmat(matrix));
  await fs.writeFile(idsPathFor(path), ids.map((id) => id + '\n').join(''), 'utf-8');
}

export async function readSmat(path: string): Promise<{ matrix: Matrix; ids: string[] }> {
  const matrix = decodeSmat(await fs.readFile(path));
  const text = await fs.readFile(idsPathFor(path), 'utf-8');
  const ids = text.length ? text.replace(/\n$/, '').split('\n') : [];
  if (ids.length !== matrix.rows) {
    throw new Error(`${ids.length} ids for ${matrix.rows} rows`);
  }
  return { matrix, ids };
}
