import { describe, expect, it, vi } from 'vitest';

import { HashedEncoder, RemoteEncoder } from '../src/encoders.js';

describe('hashed encoder', () => {
  it('is deterministic and duplicate inputs give identical rows', async () => {
    const encoder = new HashedEncoder(64);
    const [a, b, c] = await encoder.embed([
      'A man riding a horse',
      'A dog chasing a bike',
      'A man riding a horse',
    ]);
    expect(Buffer.from(a.buffer).equals(Buffer.from(c.buffer))).toBe(true);
    expect(Buffer.from(a.buffer).equals(Buffer.from(b.buffer))).toBe(false);
  });

  it('produces unit rows when normalizing', async () => {
    const encoder = new HashedEncoder(32, true);
    const [row] = await encoder.embed(['an elephant eating an apple']);
    let norm = 0;
    for (const v of row) norm += v * v;
    expect(Math.abs(Math.sqrt(norm) - 1)).toBeLessThan(1e-6);
  });

  it('separates unrelated texts', async () => {
    const encoder = new HashedEncoder(128, true);
    const [a, b] = await encoder.embed(['a man riding a horse', 'a cat drinking milk']);
    let dot = 0;
    for (let i = 0; i < a.length; i++) dot += a[i] * b[i];
    expect(dot).toBeLessThan(0.9);
  });
});

describe('remote encoder', () => {
  it('batches requests and retries 5xx', async () => {
    let calls = 0;
    const fetchImpl = vi.fn(async (_url: any, init: any) => {
      calls++;
      if (calls === 1) return new Response('oops', { status: 503 });
      const { texts } = JSON.parse(init.body);
      return Response.json({ embeddings: texts.map(() => [1, 2, 3]) });
    });
    const encoder = new RemoteEncoder({
      url: 'http://svc.test',
      dim: 3,
      batchSize: 2,
      retry: { maxRetries: 3, delayMs: 1 },
      fetchImpl: fetchImpl as any,
    });
    const rows = await encoder.embed(['a', 'b', 'c']);
    expect(rows.length).toBe(3);
    expect(calls).toBe(3); // retry + two batches
  });

  it('rejects wrong dims', async () => {
    const fetchImpl = async () => Response.json({ embeddings: [[1, 2]] });
    const encoder = new RemoteEncoder({
      url: 'http://svc.test',
      dim: 3,
      fetchImpl: fetchImpl as any,
    });
    await expect(encoder.embed(['a'])).rejects.toThrow(/dim/);
  });

  it('gives up after maxRetries', async () => {
    let calls = 0;
    const fetchImpl = async () => {
      calls++;
      return new Response('down', { status: 500 });
    };
    const encoder = new RemoteEncoder({
      url: 'http://svc.test',
      dim: 3,
      retry: { maxRetries: 3, delayMs: 1 },
      fetchImpl: fetchImpl as any,
    });
    await expect(encoder.embed(['a'])).rejects.toThrow(/500/);
    expect(calls).toBe(3);
  });
});
