import { PassThrough } from "node:stream";

import { describe, expect, it } from "vitest";

import { ReferenceVisionLanguageModel } from "../dist/model.js";
import {
  FrameParser,
  PROTOCOL_VERSION,
  encodeFrame,
  tensorToWire,
} from "../dist/protocol.js";
import { serveStreams } from "../dist/server.js";

/** In-memory client driving a served model through real byte streams. */
class TestClient {
  private input = new PassThrough();
  private output = new PassThrough();
  private parser = new FrameParser();
  private pending: Buffer[] = [];
  private waiters: ((frame: Record<string, unknown>) => void)[] = [];
  readonly finished: Promise<void>;

  constructor(factory: () => ReferenceVisionLanguageModel = () => new ReferenceVisionLanguageModel()) {
    this.finished = serveStreams(factory, this.input, this.output);
    this.output.on("data", (chunk: Buffer) => {
      for (const raw of this.parser.push(chunk)) {
        const frame = JSON.parse(raw.toString());
        const waiter = this.waiters.shift();
        if (waiter) waiter(frame);
        else this.pending.push(raw);
      }
    });
  }

  sendRaw(data: Buffer): void {
    const header = Buffer.alloc(4);
    header.writeUInt32BE(data.length, 0);
    this.input.write(Buffer.concat([header, data]));
  }

  send(payload: unknown): void {
    this.input.write(encodeFrame(payload));
  }

  next(): Promise<Record<string, unknown>> {
    const queued = this.pending.shift();
    if (queued) return Promise.resolve(JSON.parse(queued.toString()));
    return new Promise((resolve) => this.waiters.push(resolve));
  }

  async call(payload: unknown): Promise<Record<string, unknown>> {
    this.send(payload);
    return this.next();
  }

  async handshake(id = 1): Promise<Record<string, unknown>> {
    return this.call({
      id,
      method: "handshake",
      params: { client_version: PROTOCOL_VERSION },
    });
  }
}

function errorCode(frame: Record<string, unknown>): number {
  return (frame.error as { code: number }).code;
}

describe("adapter server", () => {
  it("answers handshake with capabilities, dimension, and neutral embedding", async () => {
    const client = new TestClient();
    const frame = await client.handshake();
    const result = frame.result as Record<string, unknown>;
    expect(result.server_version).toBe(PROTOCOL_VERSION);
    expect(result.capabilities).toEqual([
      "evaluate",
      "generate",
      "image_encode",
      "text_encode",
    ]);
    expect(result.dimension).toBe(32);
    const neutral = result.neutral_embedding as { shape: number[] };
    expect(neutral.shape).toEqual([32]);
  });

  it("rejects incompatible client versions with code 1, staying usable", async () => {
    const client = new TestClient();
    const rejected = await client.call({
      id: 1,
      method: "handshake",
      params: { client_version: "99.0" },
    });
    expect(errorCode(rejected)).toBe(1);
    const accepted = await client.handshake(2);
    expect(accepted.result).toBeDefined();
  });

  it("gates every other method behind handshake with code 2", async () => {
    const client = new TestClient();
    const frame = await client.call({
      id: 1,
      method: "encode_text",
      params: { text: "early" },
    });
    expect(errorCode(frame)).toBe(2);
  });

  it("recovers from malformed frames with code 2 and id -1", async () => {
    const client = new TestClient();
    client.sendRaw(Buffer.from("{not json"));
    const error = await client.next();
    expect(error.id).toBe(-1);
    expect(errorCode(error)).toBe(2);
    const handshake = await client.handshake();
    expect(handshake.result).toBeDefined();
  });

  it("rejects frames without the exact key set", async () => {
    const client = new TestClient();
    const missingParams = await client.call({ id: 1, method: "handshake" });
    expect(errorCode(missingParams)).toBe(2);
    const extraKey = await client.call({
      id: 2,
      method: "handshake",
      params: {},
      junk: true,
    });
    expect(errorCode(extraKey)).toBe(2);
  });

  it("answers unknown methods with code 3", async () => {
    const client = new TestClient();
    await client.handshake();
    const frame = await client.call({ id: 2, method: "telepathy", params: {} });
    expect(errorCode(frame)).toBe(3);
  });

  it("serves evaluate with valid distribution and attention tensors", async () => {
    const client = new TestClient();
    const handshake = await client.handshake();
    const neutral = (handshake.result as Record<string, unknown>)
      .neutral_embedding as { values: number[]; shape: number[] };
    const d = neutral.shape[0];
    const sequence: number[] = [];
    for (let i = 0; i < 5; i++) sequence.push(...neutral.values);
    const frame = await client.call({
      id: 2,
      method: "evaluate",
      params: {
        sequence: { values: sequence, shape: [5, d] },
        latent_positions: [3, 4],
        patch_positions: [1, 2],
        num_options: 4,
      },
    });
    const result = frame.result as Record<string, unknown>;
    const dists = result.distributions as { values: number[]; shape: number[] };
    expect(dists.shape).toEqual([2, 4]);
    const firstRow = dists.values.slice(0, 4);
    expect(firstRow.reduce((a, b) => a + b, 0)).toBeCloseTo(1.0, 9);
    const attention = result.attention as { shape: number[] };
    expect(attention.shape).toEqual([2, 2]);
    expect(result.latent_positions).toEqual([3, 4]);
  });

  it("maps model failures to code 4 with the message", async () => {
    const client = new TestClient();
    await client.handshake();
    const frame = await client.call({
      id: 2,
      method: "encode_text",
      params: { text: "   " },
    });
    expect(errorCode(frame)).toBe(4);
    expect((frame.error as { message: string }).message).toMatch(/empty text/);
  });

  it("shuts down with an empty result and closes the loop", async () => {
    const client = new TestClient();
    await client.handshake();
    const frame = await client.call({ id: 9, method: "shutdown", params: {} });
    expect(frame).toEqual({ id: 9, result: {} });
    await client.finished;
  });

  it("answers handshake with code 4 when the model fails to load", async () => {
    const client = new TestClient(() => {
      throw new Error("weights not found");
    });
    const frame = await client.handshake();
    expect(errorCode(frame)).toBe(4);
    expect((frame.error as { message: string }).message).toMatch(/weights not found/);
  });
});
