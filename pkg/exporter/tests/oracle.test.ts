import { describe, expect, it, vi } from 'vitest';

import {
  HashedScorer,
  RemoteScorer,
  clampProbability,
  formatOracleTsv,
  parseOracleTsv,
} from '../src/oracle.js';

describe('hashed scorer', () => {
  it('stays in [0,1] and is deterministic', async () => {
    const scorer = new HashedScorer();
    const p1 = await scorer.score('img1', 'A man riding a horse');
    const p2 = await scorer.score('img1', 'A man riding a horse');
    expect(p1).toBe(p2);
    expect(p1).toBeGreaterThanOrEqual(0);
    expect(p1).toBeLessThanOrEqual(1);
    expect(await scorer.score('img2', 'A man riding a horse')).not.toBe(p1);
  });
});

describe('oracle tsv', () => {
  it('round-trips', () => {
    const rows = [
      { imageId: 'img1', caption: 'cap000000', probability: 0.25 },
      { imageId: 'img2', caption: 'cap000001', probability: 1 },
    ];
    expect(parseOracleTsv(formatOracleTsv(rows))).toEqual(rows);
  });

  it('clamps out-of-range values with a warning', () => {
    const warnings: string[] = [];
    expect(clampProbability(1.2, warnings)).toBe(1);
    expect(clampProbability(-0.1, warnings)).toBe(0);
    expect(clampProbability(0.5, warnings)).toBe(0.5);
    expect(warnings.length).toBe(2);
  });
});

describe('remote scorer', () => {
  it('speaks the /score protocol and caches responses', async () => {
    let calls = 0;
    const fetchImpl = vi.fn(async (_url: any, init: any) => {
      calls++;
      const { image_id } = JSON.parse(init.body);
      return Response.json({ probability: image_id === 'img1' ? 0.9 : 0.1 });
    });
    const scorer = new RemoteScorer({ url: 'http://oracle.test', fetchImpl: fetchImpl as any });
    expect(await scorer.score('img1', 'caption')).toBe(0.9);
    expect(await scorer.score('img1', 'caption')).toBe(0.9);
    expect(calls).toBe(1); // second call served from cache

    const [url] = fetchImpl.mock.calls[0];
    expect(String(url)).toBe('http://oracle.test/score');
  });

  it('retries server errors', async () => {
    let calls = 0;
    const fetchImpl = async () => {
      calls++;
      if (calls < 3) return new Response('', { status: 502 });
      return Response.json({ probability: 0.4 });
    };
    const scorer = new RemoteScorer({
      url: 'http://oracle.test',
      retry: { maxRetries: 3, delayMs: 1, exponentialBackoff: true },
      fetchImpl: fetchImpl as any,
    });
    expect(await scorer.score('img', 'cap')).toBe(0.4);
    expect(calls).toBe(3);
  });
});
