/**
 * GCRF tensor files: the engine's on-disk contract.
 *
 * Layout (little-endian): magic "GCRF" | u32 version = 1 | u8 dtype = 0
 * (float32) | u8 ndim | ndim x u32 dims | row-major float32 payload.
 * Files must round-trip bit-exactly; readers reject unknown magic/version,
 * truncation, and non-finite values.
 */
import * as fs from 'fs';

export const GCRF_MAGIC = 'GCRF';
export const GCRF_VERSION = 1;
export const GCRF_DTYPE_F32 = 0;

export function encodeTensor(dims: number[], payload: Float32Array): Buffer {
  if (dims.length === 0 || dims.length > 255) {
    throw new Error(`invalid rank ${dims.length}`);
  }
  let count = 1;
  for (const d of dims) {
    if (!Number.isInteger(d) || d <= 0) throw new Error(`nonpositive dim in [${dims}]`);
    count *= d;
  }
  if (count !== payload.length) {
    throw new Error(`dims/payload mismatch: prod(${dims}) = ${count} vs ${payload.length}`);
  }
  const header = Buffer.alloc(4 + 4 + 1 + 1 + 4 * dims.length);
  header.write(GCRF_MAGIC, 0, 'ascii');
  header.writeUInt32LE(GCRF_VERSION, 4);
  header.writeUInt8(GCRF_DTYPE_F32, 8);
  header.writeUInt8(dims.length, 9);
  dims.forEach((d, i) => header.writeUInt32LE(d, 10 + 4 * i));
  const body = Buffer.alloc(4 * count);
  for (let i = 0; i < count; i++) body.writeFloatLE(payload[i], 4 * i);
  return Buffer.concat([header, body]);
}

export function writeTensor(path: string, dims: number[], payload: Float32Array): void {
  fs.writeFileSync(path, encodeTensor(dims, payload));
}

export interface Tensor {
  dims: number[];
  data: Float32Array;
}

/** Minimal strict parser; doubles as the independent checker in verify(). */
export function readTensor(path: string): Tensor {
  const buf = fs.readFileSync(path);
  if (buf.length < 10) throw new Error(`${path}: truncated header`);
  if (buf.toString('ascii', 0, 4) !== GCRF_MAGIC) {
    throw new Error(`${path}: bad magic`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== GCRF_VERSION) throw new Error(`${path}: unsupported version ${version}`);
  const dtype = buf.readUInt8(8);
  if (dtype !== GCRF_DTYPE_F32) throw new Error(`${path}: unsupported dtype ${dtype}`);
  const ndim = buf.readUInt8(9);
  if (buf.length < 10 + 4 * ndim) throw new Error(`${path}: truncated dims`);
  const dims: number[] = [];
  let count = 1;
  for (let i = 0; i < ndim; i++) {
    const d = buf.readUInt32LE(10 + 4 * i);
    if (d === 0) throw new Error(`${path}: nonpositive dim`);
    dims.push(d);
    count *= d;
  }
  const offset = 10 + 4 * ndim;
  if (buf.length < offset + 4 * count) throw new Error(`${path}: truncated payload`);
  if (buf.length > offset + 4 * count) throw new Error(`${path}: trailing bytes`);
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    const v = buf.readFloatLE(offset + 4 * i);
    if (!Number.isFinite(v)) throw new Error(`${path}: non-finite value at flat index ${i}`);
    data[i] = v;
  }
  return { dims, data };
}
