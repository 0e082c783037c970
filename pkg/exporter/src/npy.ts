/**
 * Minimal NPY (numpy array file) reader/writer for image folders.
 * Supports C-ordered little-endian f4/f8 and u1 arrays, versions 1.x/2.x.
 */

export interface NpyArray {
  shape: number[];
  data: Float64Array;
}

export function parseNpy(buf: Buffer): NpyArray {
  if (buf.length < 10 || buf[0] !== 0x93 || buf.toString('ascii', 1, 6) !== 'NUMPY') {
    throw new Error('not an NPY file');
  }
  const major = buf[6];
  let headerLen: number;
  let headerStart: number;
  if (major === 1) {
    headerLen = buf.readUInt16LE(8);
    headerStart = 10;
  } else {
    headerLen = buf.readUInt32LE(8);
    headerStart = 12;
  }
  const header = buf.toString('ascii', headerStart, headerStart + headerLen);
  const descr = /'descr':\s*'([^']+)'/.exec(header)?.[1];
  const fortran = /'fortran_order':\s*(True|False)/.exec(header)?.[1];
  const shapeText = /'shape':\s*\(([^)]*)\)/.exec(header)?.[1];
  if (!descr || !fortran || shapeText === undefined) {
    throw new Error(`unparseable NPY header: ${header.trim()}`);
  }
  if (fortran !== 'False') {
    throw new Error('fortran-ordered NPY arrays are not supported');
  }
  const shape = shapeText
    .split(',')
    .map((s) => s.trim())
    .filter((s) => s.length > 0)
    .map((s) => parseInt(s, 10));
  const count = shape.reduce((a, b) => a * b, 1);
  const body = buf.subarray(headerStart + headerLen);
  const out = new Float64Array(count);
  if (descr === '<f4') {
    for (let i = 0; i < count; i++) out[i] = body.readFloatLE(i * 4);
  } else if (descr === '<f8') {
    for (let i = 0; i < count; i++) out[i] = body.readDoubleLE(i * 8);
  } else if (descr === '|u1') {
    for (let i = 0; i < count; i++) out[i] = body[i] / 255.0;
  } else {
    throw new Error(`unsupported NPY dtype ${descr}`);
  }
  return { shape, data: out };
}

export function encodeNpy(shape: number[], data: ArrayLike<number>): Buffer {
  const dict = `{'descr': '<f4', 'fortran_order': False, 'shape': (${shape.join(', ')}${
    shape.length === 1 ? ',' : ''
  }), }`;
  const unpadded = 10 + dict.length + 1;
  const total = Math.ceil(unpadded / 64) * 64;
  const header = dict + ' '.repeat(total - unpadded) + '\n';
  const count = shape.reduce((a, b) => a * b, 1);
  const buf = Buffer.alloc(total + count * 4);
  buf[0] = 0x93;
  buf.write('NUMPY', 1, 'ascii');
  buf[6] = 1;
  buf[7] = 0;
  buf.writeUInt16LE(header.length, 8);
  buf.write(header, 10, 'ascii');
  for (let i = 0; i < count; i++) {
    buf.writeFloatLE(Math.fround(data[i]), total + i * 4);
  }
  return buf;
}
