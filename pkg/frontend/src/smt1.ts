/**
 * SMT1 packed tensor codec.
 *
 * Layout: ASCII "SMT1", u32 LE rank, rank * u32 LE extents, one dtype
 * byte (0 = float32 LE, 1 = uint8), then the raw row-major payload.
 * Decode copies the payload so the typed array is aligned and owns its
 * memory; encode/decode round-trips preserve bits.
 */

export type TensorData = Float32Array | Uint8Array;

export interface Tensor {
  shape: number[];
  data: TensorData;
}

const MAGIC = Buffer.from("SMT1", "ascii");

function elementCount(shape: number[]): number {
  let n = 1;
  for (const extent of shape) {
    if (!Number.isInteger(extent) || extent <= 0) {
      throw new Error(`SMT1 extents must be positive integers, got ${extent}`);
    }
    n *= extent;
  }
  return n;
}

export function encodeSmt1(tensor: Tensor): Buffer {
  const { shape, data } = tensor;
  const count = elementCount(shape);
  if (data.length !== count) {
    throw new Error(
      `payload has ${data.length} elements, shape wants ${count}`);
  }
  const code = data instanceof Float32Array ? 0 : 1;
  const header = Buffer.alloc(4 + 4 + 4 * shape.length + 1);
  MAGIC.copy(header, 0);
  header.writeUInt32LE(shape.length, 4);
  shape.forEach((extent, i) => header.writeUInt32LE(extent, 8 + 4 * i));
  header.writeUInt8(code, 8 + 4 * shape.length);
  return Buffer.concat([
    header,
    Buffer.from(data.buffer, data.byteOffset, data.byteLength),
  ]);
}

export function decodeSmt1(raw: Buffer): Tensor {
  if (raw.length < 9 || !raw.subarray(0, 4).equals(MAGIC)) {
    throw new Error("not an SMT1 tensor: bad magic");
  }
  const rank = raw.readUInt32LE(4);
  const headerLen = 8 + 4 * rank + 1;
  if (raw.length < headerLen) {
    throw new Error("SMT1 header truncated");
  }
  const shape: number[] = [];
  for (let i = 0; i < rank; i++) {
    shape.push(raw.readUInt32LE(8 + 4 * i));
  }
  const code = raw.readUInt8(8 + 4 * rank);
  const count = elementCount(shape);
  const width = code === 0 ? 4 : 1;
  if (code !== 0 && code !== 1) {
    throw new Error(`unknown SMT1 dtype code ${code}`);
  }
  if (raw.length !== headerLen + count * width) {
    throw new Error(
      `SMT1 payload is ${raw.length - headerLen} bytes, ` +
      `shape wants ${count * width}`);
  }
  // copy out of the file buffer: the payload is not 4-byte aligned
  const payload = new Uint8Array(raw.subarray(headerLen)).slice();
  const data = code === 0 ? new Float32Array(payload.buffer)
    : new Uint8Array(payload.buffer);
  return { shape, data };
}
