/**
 * MDET v1 container: writer plus a validating reader (used by the tests).
 * Byte layout per ../docs/format.md: "MDET", u32 version, u64 header length,
 * canonical-JSON header, then raw little-endian tensor payloads.
 */

import { readFileSync, writeFileSync } from 'node:fs';

import { Canon, F, canonicalJson } from './canonicalJson.js';

export const MAGIC = 'MDET';
export const VERSION = 1;

export type RecordKind = 'model' | 'trace' | 'dataset';
export type Dtype = 'f32' | 'i32';
export type Role =
  | 'bn_gamma'
  | 'bn_beta'
  | 'bn_running_mean'
  | 'bn_running_var'
  | 'weight'
  | 'bias'
  | 'activation'
  | 'image'
  | 'label';

export const BN_ROLES: Role[] = ['bn_gamma', 'bn_beta', 'bn_running_mean', 'bn_running_var'];

export interface MdetTensor {
  name: string;
  role: Role;
  layerIndex: number;
  dtype: Dtype;
  shape: number[];
  data: Float32Array | Int32Array;
}

export interface MdetRecord {
  kind: RecordKind;
  tensors: MdetTensor[];
  metadata: Record<string, Canon>;
}

function elementCount(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

function tensorBytes(t: MdetTensor): Buffer {
  const n = elementCount(t.shape);
  if (t.data.length !== n) {
    throw new Error(`tensor ${t.name}: shape ${JSON.stringify(t.shape)} needs ${n} values, got ${t.data.length}`);
  }
  const buf = Buffer.alloc(n * 4);
  if (t.dtype === 'f32') {
    for (let i = 0; i < n; i++) {
      const v = t.data[i];
      if (!Number.isFinite(v)) {
        throw new Error(`tensor ${t.name} contains a non-finite value at index ${i}`);
      }
      buf.writeFloatLE(Math.fround(v), i * 4);
    }
  } else {
    for (let i = 0; i < n; i++) {
      buf.writeInt32LE(t.data[i] | 0, i * 4);
    }
  }
  return buf;
}

function checkBnCompleteness(tensors: MdetTensor[]): void {
  const perLayer = new Map<number, Set<Role>>();
  const channels = new Map<number, number>();
  for (const t of tensors) {
    if (!BN_ROLES.includes(t.role)) continue;
    const roles = perLayer.get(t.layerIndex) ?? new Set<Role>();
    if (roles.has(t.role)) {
      throw new Error(`duplicate role ${t.role} for BN layer ${t.layerIndex}`);
    }
    roles.add(t.role);
    perLayer.set(t.layerIndex, roles);
    const c = channels.get(t.layerIndex);
    if (t.shape.length !== 1) {
      throw new Error(`BN tensor ${t.name} must be one-dimensional`);
    }
    if (c !== undefined && c !== t.shape[0]) {
      throw new Error(`BN layer ${t.layerIndex} roles disagree on channel count`);
    }
    channels.set(t.layerIndex, t.shape[0]);
  }
  for (const [layer, roles] of perLayer) {
    const missing = BN_ROLES.filter((r) => !roles.has(r));
    if (missing.length) {
      throw new Error(`BN layer ${layer} is missing roles ${missing.join(', ')}`);
    }
  }
}

export function encodeMdet(record: MdetRecord): Buffer {
  if (record.kind === 'model') {
    checkBnCompleteness(record.tensors);
  }
  const chunks: Buffer[] = [];
  const entries: Canon[] = [];
  let offset = 0;
  for (const t of record.tensors) {
    const raw = tensorBytes(t);
    entries.push({
      byte_len: raw.length,
      byte_offset: offset,
      dtype: t.dtype,
      layer_index: t.layerIndex,
      name: t.name,
      role: t.role,
      shape: t.shape,
    });
    chunks.push(raw);
    offset += raw.length;
  }
  const header = Buffer.from(
    canonicalJson({ entries, kind: record.kind, metadata: record.metadata }),
    'utf8',
  );
  const prologue = Buffer.alloc(16);
  prologue.write(MAGIC, 0, 'ascii');
  prologue.writeUInt32LE(VERSION, 4);
  prologue.writeBigUInt64LE(BigInt(header.length), 8);
  return Buffer.concat([prologue, header, ...chunks]);
}

export function writeMdet(record: MdetRecord, path: string): void {
  writeFileSync(path, encodeMdet(record));
}

export interface ParsedEntry {
  name: string;
  role: Role;
  layerIndex: number;
  dtype: Dtype;
  shape: number[];
  byteOffset: number;
  byteLen: number;
}

export interface ParsedMdet {
  kind: RecordKind;
  entries: ParsedEntry[];
  metadata: Record<string, unknown>;
  load(entry: ParsedEntry): Float32Array | Int32Array;
}

/** Minimal validating reader; the Python library remains the reference implementation. */
export function readMdet(path: string): ParsedMdet {
  const raw = readFileSync(path);
  if (raw.length < 16 || raw.toString('ascii', 0, 4) !== MAGIC) {
    throw new Error(`${path}: not an MDET file`);
  }
  if (raw.readUInt32LE(4) !== VERSION) {
    throw new Error(`${path}: unsupported version ${raw.readUInt32LE(4)}`);
  }
  const headerLen = Number(raw.readBigUInt64LE(8));
  if (16 + headerLen > raw.length) {
    throw new Error(`${path}: declared header length ${headerLen} exceeds file size`);
  }
  const header = JSON.parse(raw.toString('utf8', 16, 16 + headerLen));
  const payload = raw.subarray(16 + headerLen);
  const entries: ParsedEntry[] = header.entries.map((e: Record<string, unknown>) => ({
    name: e.name,
    role: e.role,
    layerIndex: e.layer_index,
    dtype: e.dtype,
    shape: e.shape,
    byteOffset: e.byte_offset,
    byteLen: e.byte_len,
  }));
  for (const e of entries) {
    if (e.byteOffset < 0 || e.byteOffset + e.byteLen > payload.length) {
      throw new Error(`${path}: entry ${e.name} exceeds the payload`);
    }
    if (e.byteLen !== elementCount(e.shape) * 4) {
      throw new Error(`${path}: entry ${e.name} byte_len does not match its shape`);
    }
  }
  return {
    kind: header.kind,
    entries,
    metadata: header.metadata ?? {},
    load(entry: ParsedEntry) {
      const n = elementCount(entry.shape);
      const out = entry.dtype === 'f32' ? new Float32Array(n) : new Int32Array(n);
      for (let i = 0; i < n; i++) {
        const at = entry.byteOffset + i * 4;
        out[i] = entry.dtype === 'f32' ? payload.readFloatLE(at) : payload.readInt32LE(at);
      }
      return out;
    },
  };
}

export { F };
