/**
 * Wire protocol primitives.
 *
 * Frames are a 4-byte big-endian payload length followed by a UTF-8 JSON
 * map with keys exactly {"id","method","params"} (request) or
 * {"id","result"} / {"id","error"} (response). Error codes: 1 version
 * mismatch, 2 malformed message, 3 unsupported method, 4 backend failure,
 * 5 timeout (client side only).
 */

export const PROTOCOL_VERSION = "1.0";
export const MAX_FRAME_BYTES = 256 * 1024 * 1024;

export const CODE_VERSION_MISMATCH = 1;
export const CODE_MALFORMED = 2;
export const CODE_UNSUPPORTED = 3;
export const CODE_BACKEND_FAILURE = 4;

export const METHODS = [
  "handshake",
  "encode_text",
  "encode_image",
  "evaluate",
  "generate",
  "shutdown",
] as const;

export type Method = (typeof METHODS)[number];

export interface Tensor {
  values: number[];
  shape: number[];
}

export interface RequestFrame {
  id: number;
  method: Method;
  params: Record<string, unknown>;
}

export type ResponseFrame =
  | { id: number; result: Record<string, unknown> }
  | { id: number; error: { code: number; message: string } };

export class AdapterError extends Error {
  constructor(
    public readonly code: number,
    message: string,
  ) {
    super(message);
  }
}

export function encodeFrame(payload: unknown): Buffer {
  const data = Buffer.from(JSON.stringify(payload), "utf-8");
  const header = Buffer.alloc(4);
  header.writeUInt32BE(data.length, 0);
  return Buffer.concat([header, data]);
}

/** Incremental parser tolerating arbitrary chunk boundaries. */
export class FrameParser {
  private buffer: Buffer = Buffer.alloc(0);

  /** Feed a chunk; returns every complete raw payload it unlocked. */
  push(chunk: Buffer): Buffer[] {
    this.buffer = this.buffer.length
      ? Buffer.concat([this.buffer, chunk])
      : chunk;
    const frames: Buffer[] = [];
    while (this.buffer.length >= 4) {
      const length = this.buffer.readUInt32BE(0);
      if (length > MAX_FRAME_BYTES) {
        throw new AdapterError(
          CODE_MALFORMED,
          `frame of ${length} bytes exceeds limit`,
        );
      }
      if (this.buffer.length < 4 + length) {
        break;
      }
      frames.push(this.buffer.subarray(4, 4 + length));
      this.buffer = this.buffer.subarray(4 + length);
    }
    return frames;
  }
}

export function tensorToWire(values: Float64Array | number[], shape: number[]): Tensor {
  return { values: Array.from(values), shape: [...shape] };
}

export function tensorFromWire(raw: unknown): { data: Float64Array; shape: number[] } {
  if (
    typeof raw !== "object" ||
    raw === null ||
    !Array.isArray((raw as Tensor).values) ||
    !Array.isArray((raw as Tensor).shape)
  ) {
    throw new AdapterError(CODE_MALFORMED, "tensor must be {values, shape}");
  }
  const { values, shape } = raw as Tensor;
  if (!shape.every((n) => Number.isInteger(n) && n >= 0)) {
    throw new AdapterError(CODE_MALFORMED, "tensor shape must be non-negative integers");
  }
  const expected = shape.reduce((a, b) => a * b, 1);
  if (values.length !== expected) {
    throw new AdapterError(
      CODE_MALFORMED,
      `tensor has ${values.length} values but shape implies ${expected}`,
    );
  }
  if (!values.every((v) => typeof v === "number" && Number.isFinite(v))) {
    throw new AdapterError(CODE_MALFORMED, "tensor values must be finite numbers");
  }
  return { data: Float64Array.from(values), shape: [...shape] };
}

export function majorVersion(version: string): string {
  return version.split(".", 1)[0] ?? "";
}
