/**
 * Canonical JSON for MDET headers (see ../docs/format.md).
 *
 * Two independent writers must produce identical bytes for the same record,
 * so the serialization is pinned: keys sorted bytewise, no whitespace,
 * minimal string escaping, integers in plain decimal, and floats in
 * normalized scientific notation with 17 significant digits and a bare
 * exponent. Schema fields that are conceptually floating-point wrap their
 * value in `F` so that e.g. eps=0 still prints in float form.
 */

export class F {
  constructor(public readonly value: number) {}
}

export type Canon = null | boolean | number | F | string | Canon[] | { [key: string]: Canon };

const ESCAPES: Record<string, string> = {
  '"': '\\"',
  '\\': '\\\\',
  '\b': '\\b',
  '\f': '\\f',
  '\n': '\\n',
  '\r': '\\r',
  '\t': '\\t',
};

function escapeString(s: string): string {
  let out = '"';
  for (const ch of s) {
    if (ESCAPES[ch] !== undefined) {
      out += ESCAPES[ch];
    } else if (ch.charCodeAt(0) < 0x20) {
      out += '\\u' + ch.charCodeAt(0).toString(16).padStart(4, '0');
    } else {
      out += ch;
    }
  }
  return out + '"';
}

export function formatFloat(x: number): string {
  if (!Number.isFinite(x)) {
    throw new Error(`non-finite number in header: ${x}`);
  }
  if (x === 0) {
    return '0e0';
  }
  const [mantissa, exponent] = x.toExponential(16).split('e');
  return `${mantissa}e${parseInt(exponent, 10)}`;
}

function emit(value: Canon, out: string[]): void {
  if (value === null) {
    out.push('null');
  } else if (value === true || value === false) {
    out.push(value ? 'true' : 'false');
  } else if (typeof value === 'string') {
    out.push(escapeString(value));
  } else if (value instanceof F) {
    out.push(formatFloat(value.value));
  } else if (typeof value === 'number') {
    if (!Number.isInteger(value)) {
      throw new Error(`bare number ${value} is not an integer; wrap floats in F()`);
    }
    out.push(String(value));
  } else if (Array.isArray(value)) {
    out.push('[');
    value.forEach((item, i) => {
      if (i > 0) out.push(',');
      emit(item, out);
    });
    out.push(']');
  } else if (typeof value === 'object') {
    out.push('{');
    Object.keys(value)
      .sort()
      .forEach((key, i) => {
        if (i > 0) out.push(',');
        out.push(escapeString(key));
        out.push(':');
        emit(value[key], out);
      });
    out.push('}');
  } else {
    throw new Error(`cannot serialize ${typeof value} in header`);
  }
}

export function canonicalJson(value: Canon): string {
  const out: string[] = [];
  emit(value, out);
  return out.join('');
}
