// Text encoders producing fixed-dim float32 rows.
//
// `hashed` is a deterministic signed feature-hashing encoder (token +
// character-trigram features, uniform mean weighting): no model weights, no
// network, bitwise reproducible, so exporter plumbing and the engine
// contract can be tested offline. `remote` posts batches to an embedding
// service (CLIP-style deployments) with retry/backoff.

import { withRetry, RetryConfig } from './retry.js';

export interface Encoder {
  name: string;
  dim: number;
  embed(texts: string[]): Promise<Float32Array[]>;
  /** human-readable note on how a sentence is reduced to one vector */
  weighting: string;
}

export function fnv1a(text: string, seed = 0x811c9dc5): number {
  let hash = seed >>> 0;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

function tokenize(text: string): string[] {
  return text.toLowerCase().split(/[^a-z0-9]+/).filter(Boolean);
}

function* features(token: string): Generator<string> {
  yield `t:${token}`;
  const padded = `^${token}$`;
  for (let i = 0; i + 3 <= padded.length; i++) {
    yield `g:${padded.slice(i, i + 3)}`;
  }
}

export class HashedEncoder implements Encoder {
  name = 'hashed';
  weighting = 'uniform mean over token feature vectors';

  constructor(
    public dim: number,
    private normalize: boolean = true,
  ) {
    if (dim < 1) throw new Error('dim must be >= 1');
  }

  embedOne(text: string): Float32Array {
    const accumulator = new Float64Array(this.dim);
    const tokens = tokenize(text);
    for (const token of tokens) {
      for (const feature of features(token)) {
        const hash = fnv1a(feature);
        const bucket = hash % this.dim;
        const sign = (hash & 0x80000000) !== 0 ? -1 : 1;
        accumulator[bucket] += sign / Math.max(1, tokens.length);
      }
    }
    if (this.normalize) {
      let norm = 0;
      for (const v of accumulator) norm += v * v;
      norm = Math.sqrt(norm);
      if (norm > 0) {
        for (let i = 0; i < this.dim; i++) accumulator[i] /= norm;
      } else {
        accumulator[fnv1a(text) % this.dim] = 1; // empty text: deterministic unit vector
      }
    }
    return Float32Array.from(accumulator);
  }

  async embed(texts: string[]): Promise<Float32Array[]> {
    return texts.map((t) => this.embedOne(t));
  }
}

export interface RemoteEncoderOptions {
  url: string;
  dim: number;
  batchSize?: number;
  retry?: RetryConfig;
  fetchImpl?: typeof fetch;
}

export class RemoteEncoder implements Encoder {
  name = 'remote';
  weighting = 'as produced by the remote service';
  dim: number;
  private url: string;
  private batchSize: number;
  private retry: RetryConfig;
  private fetchImpl: typeof fetch;

  constructor(options: RemoteEncoderOptions) {
    this.url = options.url.replace(/\/$/, '');
    this.dim = options.dim;
    this.batchSize = options.batchSize ?? 64;
    this.retry = options.retry ?? { maxRetries: 3, delayMs: 200, exponentialBackoff: true };
    this.fetchImpl = options.fetchImpl ?? fetch;
  }

  async embed(texts: string[]): Promise<Float32Array[]> {
    const out: Float32Array[] = [];
    for (let start = 0; start < texts.length; start += this.batchSize) {
      const batch = texts.slice(start, start + this.batchSize);
      const rows = await withRetry(
        async () => {
          const response = await this.fetchImpl(`${this.url}/embed`, {
            method: 'POST',
            headers: { 'content-type': 'application/json' },
            body: JSON.stringify({ texts: batch }),
          });
          if (!response.ok) {
            const error = new Error(`embedding service returned ${response.status}`);
            (error as any).status = response.status;
            throw error;
          }
          const body = (await response.json()) as { embeddings: number[][] };
          return body.embeddings;
        },
        this.retry,
        'embed batch',
      );
      if (rows.length !== batch.length) {
        throw new Error(`service returned ${rows.length} rows for ${batch.length} inputs`);
      }
      for (const row of rows) {
        if (row.length !== this.dim) {
          throw new Error(`service returned dim ${row.length}, expected ${this.dim}`);
        }
        out.push(Float32Array.from(row));
      }
    }
    return out;
  }
}

export function makeEncoder(
  name: string,
  dim: number,
  normalize: boolean,
  fetchImpl?: typeof fetch,
): Encoder {
  if (name === 'hashed') return new HashedEncoder(dim, normalize);
  if (name === 'remote') {
    const url = process.env.EXPORTER_URL;
    if (!url) throw new Error('remote encoder needs EXPORTER_URL');
    return new RemoteEncoder({ url, dim, fetchImpl });
  }
  throw new Error(`unknown encoder ${JSON.stringify(name)} (expected hashed or remote)`);
}
