/**
 * Minimal safetensors container I/O.
 *
 * Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
 * tensor name -> {dtype, shape, data_offsets}, then the raw little-endian
 * payload. Offsets are relative to the end of the header.
 *
 * Reads decode F32/F16/BF16 to float64; writes always store F32 and are
 * deterministic (sorted names, compact JSON padded with spaces to an 8-byte
 * boundary, payload in name order), so re-exporting the same slice produces
 * byte-identical files.
 */

import { closeSync, mkdirSync, openSync, readSync, statSync, writeFileSync } from 'fs';
import { dirname } from 'path';

import { Mat, mat } from './matrix.js';

const SUPPORTED_DTYPES = new Set(['F32', 'F16', 'BF16']);

interface HeaderEntry {
  dtype: string;
  shape: number[];
  data_offsets: [number, number];
}

export class SafetensorsFile {
  readonly path: string;
  private readonly entries: Map<string, HeaderEntry>;
  private readonly payloadStart: number;

  constructor(path: string) {
    this.path = path;
    const fd = openSync(path, 'r');
    try {
      const lenBuf = Buffer.alloc(8);
      if (readSync(fd, lenBuf, 0, 8, 0) !== 8) {
        throw new Error(`${path}: truncated header length`);
      }
      const headerLen = Number(lenBuf.readBigUInt64LE(0));
      const fileSize = statSync(path).size;
      if (8 + headerLen > fileSize) {
        throw new Error(`${path}: header length exceeds file size`);
      }
      const headerBuf = Buffer.alloc(headerLen);
      readSync(fd, headerBuf, 0, headerLen, 8);
      let header: Record<string, unknown>;
      try {
        header = JSON.parse(headerBuf.toString('utf-8'));
      } catch (err) {
        throw new Error(`${path}: malformed header JSON: ${(err as Error).message}`);
      }
      this.payloadStart = 8 + headerLen;
      this.entries = new Map();
      for (const [name, raw] of Object.entries(header)) {
        if (name === '__metadata__') continue;
        const entry = raw as HeaderEntry;
        if (!SUPPORTED_DTYPES.has(entry.dtype)) {
          throw new Error(`${path}: unsupported dtype ${entry.dtype} for tensor ${name}`);
        }
        this.entries.set(name, entry);
      }
    } finally {
      closeSync(fd);
    }
  }

  names(): string[] {
    return [...this.entries.keys()];
  }

  has(name: string): boolean {
    return this.entries.has(name);
  }

  shape(name: string): number[] {
    return [...this.entry(name).shape];
  }

  private entry(name: string): HeaderEntry {
    const entry = this.entries.get(name);
    if (!entry) throw new Error(`${this.path}: no tensor named ${name}`);
    return entry;
  }

  /** Decode one 2-D tensor to float64. */
  read(name: string): Mat {
    const entry = this.entry(name);
    if (entry.shape.length !== 2) {
      throw new Error(`${this.path}: tensor ${name} has shape [${entry.shape}], expected 2-D`);
    }
    const [start, end] = entry.data_offsets;
    const itemSize = entry.dtype === 'F32' ? 4 : 2;
    const count = entry.shape[0] * entry.shape[1];
    if (end - start !== count * itemSize) {
      throw new Error(`${this.path}: data_offsets disagree with shape for tensor ${name}`);
    }
    const buf = Buffer.alloc(end - start);
    const fd = openSync(this.path, 'r');
    try {
      if (readSync(fd, buf, 0, buf.length, this.payloadStart + start) !== buf.length) {
        throw new Error(`${this.path}: truncated payload for tensor ${name}`);
      }
    } finally {
      closeSync(fd);
    }
    const out = mat(entry.shape[0], entry.shape[1]);
    for (let i = 0; i < count; i++) {
      out.data[i] = decodeElement(buf, i, entry.dtype);
    }
    return out;
  }
}

function decodeElement(buf: Buffer, index: number, dtype: string): number {
  if (dtype === 'F32') return buf.readFloatLE(index * 4);
  const bits = buf.readUInt16LE(index * 2);
  if (dtype === 'BF16') return bf16ToNumber(bits);
  return f16ToNumber(bits);
}

function bf16ToNumber(bits: number): number {
  // bf16 is the top half of an f32
  const scratch = new DataView(new ArrayBuffer(4));
  scratch.setUint32(0, bits << 16, true);
  return scratch.getFloat32(0, true);
}

function f16ToNumber(bits: number): number {
  const sign = bits & 0x8000 ? -1 : 1;
  const exponent = (bits & 0x7c00) >> 10;
  const fraction = bits & 0x03ff;
  if (exponent === 0) return sign * Math.pow(2, -14) * (fraction / 1024);
  if (exponent === 0x1f) return fraction ? NaN : sign * Infinity;
  return sign * Math.pow(2, exponent - 15) * (1 + fraction / 1024);
}

/** Write float64 matrices as F32 tensors; deterministic byte layout. */
export function writeSafetensors(path: string, tensors: Map<string, Mat>): void {
  if (tensors.size === 0) throw new Error('refusing to write an empty safetensors file');
  const names = [...tensors.keys()].sort();
  const header: Record<string, HeaderEntry> = {};
  const payloads: Buffer[] = [];
  let offset = 0;
  for (const name of names) {
    const m = tensors.get(name)!;
    const payload = Buffer.alloc(m.data.length * 4);
    for (let i = 0; i < m.data.length; i++) {
      payload.writeFloatLE(Math.fround(m.data[i]), i * 4);
    }
    header[name] = {
      dtype: 'F32',
      shape: [m.rows, m.cols],
      data_offsets: [offset, offset + payload.length],
    };
    payloads.push(payload);
    offset += payload.length;
  }
  let blob = Buffer.from(JSON.stringify(header), 'utf-8');
  const pad = (8 - ((8 + blob.length) % 8)) % 8;
  if (pad) blob = Buffer.concat([blob, Buffer.alloc(pad, 0x20)]);
  const lenBuf = Buffer.alloc(8);
  lenBuf.writeBigUInt64LE(BigInt(blob.length), 0);
  mkdirSync(dirname(path), { recursive: true });
  writeFileSync(path, Buffer.concat([lenBuf, blob, ...payloads]));
}
