/**
 * The hosted model behind the adapter.
 *
 * HostedModel is the integration point for a real multimodal model; the
 * shipped ReferenceVisionLanguageModel is a deterministic embedding-level
 * stand-in with the same surfaces: text/image encoders into a shared
 * d-dimensional space, an evaluate pass that reads a probability
 * distribution over the C option symbols at every latent-token position
 * (option-letter readout) and reports latent-to-patch attention as the
 * mean over heads of its final attention layer, and free-text generation.
 */

import { readFileSync } from "node:fs";

import { AdapterError, CODE_BACKEND_FAILURE } from "./protocol.js";

export interface AdapterConfig {
  modelIdentifier: string;
  device: string;
  answerReadout: "option_letter_logits" | "constrained_decode";
  /** Fixed aggregation rule for reported attention. */
  attentionAggregation: "last layer, mean over heads";
  dimension: number;
  seed: number;
  deterministic: boolean;
}

export const DEFAULT_CONFIG: AdapterConfig = {
  modelIdentifier: "reference-vlm",
  device: "cpu",
  answerReadout: "option_letter_logits",
  attentionAggregation: "last layer, mean over heads",
  dimension: 32,
  seed: 0,
  deterministic: true,
};

export interface EvaluatePayload {
  distributions: Float64Array[]; // m rows of C probabilities
  attention: Float64Array[]; // m rows over the patch positions
  latentPositions: number[];
}

export interface HostedModel {
  readonly config: AdapterConfig;
  readonly capabilities: string[];
  neutralEmbedding(): Float64Array;
  encodeText(text: string): Float64Array;
  encodeImage(reference: string | Record<string, unknown>): {
    pooled: Float64Array;
    patches: Float64Array[];
  };
  evaluate(
    sequence: Float64Array[],
    latentPositions: number[],
    patchPositions: number[],
    numOptions: number,
  ): EvaluatePayload;
  generate(
    sequence: Float64Array[],
    latentPositions: number[],
    patchPositions: number[],
  ): string;
}

// ---------------------------------------------------------------------------
// Deterministic pseudo-randomness (no Math.random anywhere)
// ---------------------------------------------------------------------------

function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return hash >>> 0;
}

function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/** Standard-normal draws keyed by an arbitrary string. */
function gaussianStream(key: string): () => number {
  const uniform = mulberry32(fnv1a(key));
  let spare: number | null = null;
  return () => {
    if (spare !== null) {
      const value = spare;
      spare = null;
      return value;
    }
    let u = 0;
    let v = 0;
    do {
      u = uniform();
    } while (u === 0);
    v = uniform();
    const radius = Math.sqrt(-2 * Math.log(u));
    spare = radius * Math.sin(2 * Math.PI * v);
    return radius * Math.cos(2 * Math.PI * v);
  };
}

function gaussianVector(key: string, length: number): Float64Array {
  const next = gaussianStream(key);
  const vector = new Float64Array(length);
  for (let i = 0; i < length; i++) {
    vector[i] = next();
  }
  return vector;
}

function unitVector(key: string, length: number): Float64Array {
  const vector = gaussianVector(key, length);
  let norm = 0;
  for (const value of vector) {
    norm += value * value;
  }
  norm = Math.sqrt(norm);
  for (let i = 0; i < length; i++) {
    vector[i] /= norm;
  }
  return vector;
}

function matmulVec(matrix: Float64Array, rows: number, cols: number, vec: Float64Array): Float64Array {
  // matrix is row-major (rows x cols); returns vec (length rows) . matrix -> length cols
  const out = new Float64Array(cols);
  for (let r = 0; r < rows; r++) {
    const value = vec[r];
    if (value === 0) continue;
    const offset = r * cols;
    for (let c = 0; c < cols; c++) {
      out[c] += value * matrix[offset + c];
    }
  }
  return out;
}

function softmax(logits: Float64Array): Float64Array {
  let max = -Infinity;
  for (const value of logits) {
    if (value > max) max = value;
  }
  const out = new Float64Array(logits.length);
  let total = 0;
  for (let i = 0; i < logits.length; i++) {
    out[i] = Math.exp(logits[i] - max);
    total += out[i];
  }
  for (let i = 0; i < out.length; i++) {
    out[i] /= total;
  }
  return out;
}

/** Renormalize in place so the row sums to 1 up to float rounding. */
function renormalize(row: Float64Array): Float64Array {
  let total = 0;
  for (const value of row) total += value;
  if (total <= 0) {
    throw new AdapterError(CODE_BACKEND_FAILURE, "attention row has no mass");
  }
  for (let i = 0; i < row.length; i++) row[i] /= total;
  return row;
}

// ---------------------------------------------------------------------------
// Reference model
// ---------------------------------------------------------------------------

const ATTENTION_HEADS = 2;
const FALLBACK_PATCH_GRID = 9;

export class ReferenceVisionLanguageModel implements HostedModel {
  readonly capabilities = ["text_encode", "image_encode", "evaluate", "generate"];
  private readonly matrixCache = new Map<string, Float64Array>();
  private evaluateCalls = 0;

  constructor(readonly config: AdapterConfig = DEFAULT_CONFIG) {
    if (config.dimension < 2) {
      throw new AdapterError(CODE_BACKEND_FAILURE, "dimension must be >= 2");
    }
  }

  private weightKey(name: string): string {
    return `${this.config.modelIdentifier}:${this.config.seed}:${this.config.dimension}:${name}`;
  }

  private matrix(name: string, rows: number, cols: number): Float64Array {
    const key = `${this.weightKey(name)}:${rows}x${cols}`;
    let cached = this.matrixCache.get(key);
    if (!cached) {
      cached = gaussianVector(key, rows * cols);
      const scale = 1 / Math.sqrt(cols);
      for (let i = 0; i < cached.length; i++) cached[i] *= scale;
      this.matrixCache.set(key, cached);
    }
    return cached;
  }

  neutralEmbedding(): Float64Array {
    return this.encodeText("think");
  }

  encodeText(text: string): Float64Array {
    const tokens = text.split(/\s+/).filter((t) => t.length > 0);
    if (tokens.length === 0) {
      throw new AdapterError(CODE_BACKEND_FAILURE, "empty text");
    }
    const d = this.config.dimension;
    const total = new Float64Array(d);
    for (const token of tokens) {
      const vector = unitVector(this.weightKey(`token:${token}`), d);
      for (let i = 0; i < d; i++) total[i] += vector[i];
    }
    let norm = 0;
    for (const value of total) norm += value * value;
    norm = Math.sqrt(norm);
    if (norm < 1e-12) {
      throw new AdapterError(CODE_BACKEND_FAILURE, "degenerate text embedding");
    }
    for (let i = 0; i < d; i++) total[i] /= norm;
    return total;
  }

  encodeImage(reference: string | Record<string, unknown>): {
    pooled: Float64Array;
    patches: Float64Array[];
  } {
    if (typeof reference !== "string") {
      return this.imageFromSpec(reference);
    }
    let content: Buffer;
    try {
      content = readFileSync(reference);
    } catch (error) {
      throw new AdapterError(
        CODE_BACKEND_FAILURE,
        `cannot read image ${reference}: ${(error as Error).message}`,
      );
    }
    try {
      const parsed = JSON.parse(content.toString("utf-8"));
      if (parsed && typeof parsed === "object" && "pooled" in parsed && "patches" in parsed) {
        return this.imageFromSpec(parsed as Record<string, unknown>);
      }
    } catch {
      // Not a feature-spec file: featurize the raw bytes below.
    }
    return this.imageFromBytes(content);
  }

  private imageFromSpec(spec: Record<string, unknown>): {
    pooled: Float64Array;
    patches: Float64Array[];
  } {
    const pooled = spec.pooled;
    const patches = spec.patches;
    if (!Array.isArray(pooled) || !Array.isArray(patches) || patches.length === 0) {
      throw new AdapterError(CODE_BACKEND_FAILURE, "image spec needs pooled and patches");
    }
    const d = this.config.dimension;
    if (pooled.length !== d || patches.some((p) => !Array.isArray(p) || p.length !== d)) {
      throw new AdapterError(
        CODE_BACKEND_FAILURE,
        `image spec dimension does not match model dimension ${d}`,
      );
    }
    return {
      pooled: Float64Array.from(pooled as number[]),
      patches: (patches as number[][]).map((p) => Float64Array.from(p)),
    };
  }

  private imageFromBytes(content: Buffer): {
    pooled: Float64Array;
    patches: Float64Array[];
  } {
    // Content-determined featurization: the stand-in for a visual encoder.
    const digest = fnv1a(content.toString("base64"));
    const d = this.config.dimension;
    const pooled = unitVector(this.weightKey(`image:${digest}`), d);
    const patches: Float64Array[] = [];
    for (let p = 0; p < FALLBACK_PATCH_GRID; p++) {
      patches.push(unitVector(this.weightKey(`image:${digest}:patch:${p}`), d));
    }
    return { pooled, patches };
  }

  evaluate(
    sequence: Float64Array[],
    latentPositions: number[],
    patchPositions: number[],
    numOptions: number,
  ): EvaluatePayload {
    const d = this.config.dimension;
    const n = sequence.length;
    if (numOptions < 2) {
      throw new AdapterError(CODE_BACKEND_FAILURE, "need at least 2 answer options");
    }
    if (n === 0 || sequence.some((row) => row.length !== d)) {
      throw new AdapterError(CODE_BACKEND_FAILURE, `sequence rows must have dimension ${d}`);
    }
    for (const pos of [...latentPositions, ...patchPositions]) {
      if (!Number.isInteger(pos) || pos < 0 || pos >= n) {
        throw new AdapterError(CODE_BACKEND_FAILURE, `position ${pos} outside sequence`);
      }
    }
    if (latentPositions.length === 0) {
      throw new AdapterError(CODE_BACKEND_FAILURE, "need at least one latent position");
    }

    this.evaluateCalls += 1;
    const jitter = this.config.deterministic ? 0 : this.evaluateCalls;

    // One attention layer, two heads; reported attention is the head mean.
    const perHeadHidden: Float64Array[][] = [];
    const perHeadAttention: Float64Array[][] = [];
    for (let head = 0; head < ATTENTION_HEADS; head++) {
      const wq = this.matrix(`wq:${head}`, d, d);
      const wk = this.matrix(`wk:${head}`, d, d);
      const wv = this.matrix(`wv:${head}`, d, d);
      const queries = sequence.map((row) => matmulVec(wq, d, d, row));
      const keys = sequence.map((row) => matmulVec(wk, d, d, row));
      const values = sequence.map((row) => matmulVec(wv, d, d, row));

      const hiddenRows: Float64Array[] = [];
      const attentionRows: Float64Array[] = [];
      for (const position of latentPositions) {
        const logits = new Float64Array(n);
        for (let j = 0; j < n; j++) {
          let dot = 0;
          for (let c = 0; c < d; c++) dot += queries[position][c] * keys[j][c];
          logits[j] = dot / Math.sqrt(d) + jitter * 1e-9;
        }
        const weights = softmax(logits);
        const hidden = new Float64Array(d);
        for (let j = 0; j < n; j++) {
          for (let c = 0; c < d; c++) hidden[c] += weights[j] * values[j][c];
        }
        hiddenRows.push(hidden);
        attentionRows.push(weights);
      }
      perHeadHidden.push(hiddenRows);
      perHeadAttention.push(attentionRows);
    }

    const answerHead = this.matrix(`wa:${numOptions}`, d, numOptions);
    const distributions: Float64Array[] = [];
    const attention: Float64Array[] = [];
    for (let i = 0; i < latentPositions.length; i++) {
      const hidden = new Float64Array(d);
      for (let head = 0; head < ATTENTION_HEADS; head++) {
        for (let c = 0; c < d; c++) hidden[c] += perHeadHidden[head][i][c] / ATTENTION_HEADS;
      }
      // Option-letter readout: probabilities renormalized over the C symbols.
      distributions.push(renormalize(softmax(matmulVec(answerHead, d, numOptions, hidden))));

      const row = new Float64Array(patchPositions.length);
      for (let p = 0; p < patchPositions.length; p++) {
        let mass = 0;
        for (let head = 0; head < ATTENTION_HEADS; head++) {
          mass += perHeadAttention[head][i][patchPositions[p]] / ATTENTION_HEADS;
        }
        row[p] = mass;
      }
      attention.push(patchPositions.length > 0 ? renormalize(row) : row);
    }

    return { distributions, attention, latentPositions: [...latentPositions] };
  }

  generate(
    sequence: Float64Array[],
    latentPositions: number[],
    patchPositions: number[],
  ): string {
    return (
      `Inspection summary from ${this.config.modelIdentifier}: reasoned over ` +
      `${latentPositions.length} latent tokens with ${patchPositions.length} ` +
      `image patches in context (sequence length ${sequence.length}).`
    );
  }
}
