import { describe, expect, it } from "vitest";

import {
  AdapterError,
  FrameParser,
  encodeFrame,
  tensorFromWire,
  tensorToWire,
} from "../dist/protocol.js";

describe("frame codec", () => {
  it("parses frames split across arbitrary chunk boundaries", () => {
    const parser = new FrameParser();
    const first = encodeFrame({ id: 1, result: {} });
    const second = encodeFrame({ id: 2, result: { x: [1.5, -2.25] } });
    const stream = Buffer.concat([first, second]);

    const collected: Buffer[] = [];
    for (let offset = 0; offset < stream.length; offset += 3) {
      collected.push(...parser.push(stream.subarray(offset, offset + 3)));
    }
    expect(collected.length).toBe(2);
    expect(JSON.parse(collected[0].toString())).toEqual({ id: 1, result: {} });
    expect(JSON.parse(collected[1].toString())).toEqual({
      id: 2,
      result: { x: [1.5, -2.25] },
    });
  });

  it("rejects oversized frames", () => {
    const parser = new FrameParser();
    const header = Buffer.alloc(4);
    header.writeUInt32BE(0xffffffff, 0);
    expect(() => parser.push(header)).toThrow(AdapterError);
  });
});

describe("tensor codec", () => {
  it("round-trips awkward doubles exactly through JSON", () => {
    const values = [Math.PI, 1 / 3, -(2 ** -45), 1e300, -1e-300, 0.1 + 0.2];
    const wire = JSON.parse(JSON.stringify(tensorToWire(values, [2, 3])));
    const { data, shape } = tensorFromWire(wire);
    expect(shape).toEqual([2, 3]);
    values.forEach((value, index) => expect(data[index]).toBe(value));
  });

  it("rejects shape mismatches", () => {
    expect(() => tensorFromWire({ values: [1, 2, 3], shape: [2, 2] })).toThrow(
      AdapterError,
    );
  });

  it("rejects non-finite values", () => {
    expect(() => tensorFromWire({ values: [1, null], shape: [2] })).toThrow(
      AdapterError,
    );
  });
});
