/**
 * Framed request loop: handshake gating, method dispatch, error mapping.
 *
 * Protocol rules mirrored from the engine side: requests must carry exactly
 * {"id","method","params"}; anything else is code 2 (id -1 when the id is
 * unrecoverable); methods before handshake are code 2; unknown methods are
 * code 3; model failures are code 4 with the message propagated; shutdown
 * answers an empty result and ends the connection.
 */

import type { Readable, Writable } from "node:stream";

import type { HostedModel } from "./model.js";
import {
  AdapterError,
  CODE_BACKEND_FAILURE,
  CODE_MALFORMED,
  CODE_UNSUPPORTED,
  CODE_VERSION_MISMATCH,
  FrameParser,
  METHODS,
  PROTOCOL_VERSION,
  type Method,
  type ResponseFrame,
  encodeFrame,
  majorVersion,
  tensorFromWire,
  tensorToWire,
} from "./protocol.js";

const REQUEST_KEYS = new Set(["id", "method", "params"]);

function errorFrame(id: number, code: number, message: string): ResponseFrame {
  return { id, error: { code, message } };
}

function rowsToTensor(rows: Float64Array[], width: number) {
  const flat = new Float64Array(rows.length * width);
  rows.forEach((row, index) => flat.set(row, index * width));
  return tensorToWire(flat, [rows.length, width]);
}

function sequenceFromParams(params: Record<string, unknown>): Float64Array[] {
  const { data, shape } = tensorFromWire(params.sequence);
  if (shape.length !== 2) {
    throw new AdapterError(CODE_MALFORMED, "sequence tensor must be 2-D");
  }
  const [n, d] = shape;
  const rows: Float64Array[] = [];
  for (let i = 0; i < n; i++) {
    rows.push(data.subarray(i * d, (i + 1) * d));
  }
  return rows;
}

function positionsFromParams(params: Record<string, unknown>, key: string): number[] {
  const raw = params[key];
  if (!Array.isArray(raw) || !raw.every((v) => Number.isInteger(v))) {
    throw new AdapterError(CODE_MALFORMED, `${key} must be an integer list`);
  }
  return raw as number[];
}

/** Lazy constructor so heavyweight model loading happens at handshake. */
export type ModelFactory = () => HostedModel;

export class AdapterServer {
  private handshaken = false;
  private loadedModel: HostedModel | null = null;
  private readonly factory: ModelFactory;

  constructor(model: HostedModel | ModelFactory) {
    this.factory = typeof model === "function" ? model : () => model;
  }

  private get model(): HostedModel {
    if (this.loadedModel === null) {
      throw new AdapterError(CODE_MALFORMED, "handshake required");
    }
    return this.loadedModel;
  }

  /** Handle one raw frame payload; shutdown=true ends the connection. */
  handle(raw: Buffer): { response: ResponseFrame; shutdown: boolean } {
    let frame: unknown;
    try {
      frame = JSON.parse(raw.toString("utf-8"));
    } catch (error) {
      return {
        response: errorFrame(-1, CODE_MALFORMED, `unparseable frame: ${(error as Error).message}`),
        shutdown: false,
      };
    }

    const record = frame as Record<string, unknown>;
    const idValue = record && typeof record === "object" ? record.id : undefined;
    const id =
      typeof idValue === "number" && Number.isInteger(idValue) && idValue !== -1
        ? idValue
        : -1;

    if (
      typeof frame !== "object" ||
      frame === null ||
      Array.isArray(frame) ||
      id === -1 ||
      Object.keys(record).length !== REQUEST_KEYS.size ||
      !Object.keys(record).every((key) => REQUEST_KEYS.has(key)) ||
      typeof record.method !== "string" ||
      typeof record.params !== "object" ||
      record.params === null ||
      Array.isArray(record.params)
    ) {
      return {
        response: errorFrame(id, CODE_MALFORMED, 'request must be {"id", "method", "params"}'),
        shutdown: false,
      };
    }

    const method = record.method as string;
    const params = record.params as Record<string, unknown>;

    if (!(METHODS as readonly string[]).includes(method)) {
      return {
        response: errorFrame(id, CODE_UNSUPPORTED, `unknown method '${method}'`),
        shutdown: false,
      };
    }
    if (method !== "handshake" && !this.handshaken) {
      return {
        response: errorFrame(id, CODE_MALFORMED, "handshake required"),
        shutdown: false,
      };
    }

    try {
      return this.dispatch(id, method as Method, params);
    } catch (error) {
      if (error instanceof AdapterError) {
        return { response: errorFrame(id, error.code, error.message), shutdown: false };
      }
      return {
        response: errorFrame(id, CODE_BACKEND_FAILURE, (error as Error).message),
        shutdown: false,
      };
    }
  }

  private dispatch(
    id: number,
    method: Method,
    params: Record<string, unknown>,
  ): { response: ResponseFrame; shutdown: boolean } {
    switch (method) {
      case "handshake": {
        const clientVersion = String(params.client_version ?? "");
        if (majorVersion(clientVersion) !== majorVersion(PROTOCOL_VERSION)) {
          return {
            response: errorFrame(
              id,
              CODE_VERSION_MISMATCH,
              `client '${clientVersion}' incompatible with server '${PROTOCOL_VERSION}'`,
            ),
            shutdown: false,
          };
        }
        if (this.loadedModel === null) {
          try {
            this.loadedModel = this.factory();
          } catch (error) {
            return {
              response: errorFrame(
                id,
                CODE_BACKEND_FAILURE,
                `model load failed: ${(error as Error).message}`,
              ),
              shutdown: false,
            };
          }
        }
        this.handshaken = true;
        const neutral = this.model.neutralEmbedding();
        return {
          response: {
            id,
            result: {
              server_version: PROTOCOL_VERSION,
              capabilities: [...this.model.capabilities].sort(),
              dimension: this.model.config.dimension,
              neutral_embedding: tensorToWire(neutral, [neutral.length]),
            },
          },
          shutdown: false,
        };
      }

      case "shutdown":
        return { response: { id, result: {} }, shutdown: true };

      case "encode_text": {
        if (typeof params.text !== "string") {
          throw new AdapterError(CODE_MALFORMED, "encode_text needs a text string");
        }
        const vector = this.model.encodeText(params.text);
        return {
          response: { id, result: tensorToWire(vector, [vector.length]) as unknown as Record<string, unknown> },
          shutdown: false,
        };
      }

      case "encode_image": {
        let reference: string | Record<string, unknown>;
        if (typeof params.path === "string") {
          reference = params.path;
        } else if (typeof params.spec === "object" && params.spec !== null) {
          reference = params.spec as Record<string, unknown>;
        } else {
          throw new AdapterError(CODE_MALFORMED, "encode_image needs path or spec");
        }
        const { pooled, patches } = this.model.encodeImage(reference);
        return {
          response: {
            id,
            result: {
              pooled: tensorToWire(pooled, [pooled.length]),
              patches: rowsToTensor(patches, this.model.config.dimension),
            },
          },
          shutdown: false,
        };
      }

      case "evaluate": {
        const sequence = sequenceFromParams(params);
        const latentPositions = positionsFromParams(params, "latent_positions");
        const patchPositions = positionsFromParams(params, "patch_positions");
        if (typeof params.num_options !== "number" || !Number.isInteger(params.num_options)) {
          throw new AdapterError(CODE_MALFORMED, "num_options must be an integer");
        }
        const payload = this.model.evaluate(
          sequence,
          latentPositions,
          patchPositions,
          params.num_options,
        );
        return {
          response: {
            id,
            result: {
              distributions: rowsToTensor(payload.distributions, params.num_options),
              attention: rowsToTensor(payload.attention, patchPositions.length),
              latent_positions: payload.latentPositions,
            },
          },
          shutdown: false,
        };
      }

      case "generate": {
        const sequence = sequenceFromParams(params);
        const latentPositions = positionsFromParams(params, "latent_positions");
        const patchPositions = positionsFromParams(params, "patch_positions");
        return {
          response: {
            id,
            result: { text: this.model.generate(sequence, latentPositions, patchPositions) },
          },
          shutdown: false,
        };
      }
    }
  }
}

/** Wire the server to a byte stream pair; resolves when the peer is done. */
export function serveStreams(
  model: HostedModel | ModelFactory,
  input: Readable,
  output: Writable,
): Promise<void> {
  const server = new AdapterServer(model);
  const parser = new FrameParser();

  return new Promise((resolve, reject) => {
    let done = false;

    const finish = () => {
      if (!done) {
        done = true;
        input.removeListener("data", onData);
        resolve();
      }
    };

    const onData = (chunk: Buffer) => {
      let frames: Buffer[];
      try {
        frames = parser.push(chunk);
      } catch (error) {
        if (error instanceof AdapterError) {
          output.write(encodeFrame(errorFrame(-1, error.code, error.message)));
        }
        finish();
        return;
      }
      for (const raw of frames) {
        const { response, shutdown } = server.handle(raw);
        output.write(encodeFrame(response));
        if (shutdown) {
          finish();
          return;
        }
      }
    };

    input.on("data", onData);
    input.on("end", finish);
    input.on("error", reject);
  });
}
