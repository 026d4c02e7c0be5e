#!/usr/bin/env node
// Exporter CLI: runs encoders/scorers and dumps engine-compatible files.
//
//   embed-text   --input texts.txt --out feats.smat --encoder hashed --dim 64
//   embed-words  --input words.txt --out words.smat --encoder hashed --dim 64
//   score-oracle --images img1,img2 --captions caps.txt --out oracle.tsv
//
// Every output gets a <out>.job.json manifest recording the encoder, the
// sentence weighting, and input digests.

import { promises as fs } from 'fs';
import { parseArgs } from 'util';

import { makeEncoder } from './encoders.js';
import { digestFile, writeManifest, TOOL_VERSION } from './manifest.js';
import {
  HashedScorer,
  RemoteScorer,
  Scorer,
  clampProbability,
  formatOracleTsv,
  OracleRow,
} from './oracle.js';
import { writeSmat } from './smat.js';

async function readLines(path: string): Promise<string[]> {
  const text = await fs.readFile(path, 'utf-8');
  return text.replace(/\n$/, '').split('\n');
}

async function embedCommand(argv: string[], words: boolean): Promise<void> {
  const { values } = parseArgs({
    args: argv,
    options: {
      input: { type: 'string' },
      out: { type: 'string' },
      encoder: { type: 'string', default: 'hashed' },
      dim: { type: 'string', default: '512' },
      normalize: { type: 'boolean', default: false },
      ids: { type: 'string' },
      'batch-size': { type: 'string', default: '64' },
    },
  });
  if (!values.input || !values.out) {
    throw new Error('embed commands need --input and --out');
  }
  const dim = Number(values.dim);
  const texts = await readLines(values.input);
  if (texts.some((t) => t.length === 0)) {
    throw new Error(`${values.input}: empty line in input`);
  }
  const encoder = makeEncoder(values.encoder!, dim, values.normalize!);
  const rows = await encoder.embed(texts);

  const data = new Float32Array(texts.length * dim);
  rows.forEach((row, i) => data.set(row, i * dim));
  const ids = values.ids
    ? await readLines(values.ids)
    : texts.map((_, i) => `r${String(i).padStart(6, '0')}`);
  if (words) {
    // words.tsv row order matches the matrix; ids are the words themselves
    await fs.writeFile(
      values.out.replace(/\.smat$/, '.tsv'),
      'word\n' + texts.map((w) => w + '\n').join(''),
    );
  }
  await writeSmat(
    values.out,
    { rows: texts.length, dim, data, normalized: values.normalize! },
    words ? texts : ids,
  );
  await writeManifest(values.out + '.job.json', {
    command: words ? 'embed-words' : 'embed-text',
    encoder: encoder.name,
    dim,
    normalize: values.normalize!,
    weighting: encoder.weighting,
    rows: texts.length,
    inputs: { [values.input]: await digestFile(values.input) },
    warnings: [],
    tool_version: TOOL_VERSION,
  });
  console.log(`wrote ${texts.length}x${dim} to ${values.out}`);
}

async function scoreCommand(argv: string[]): Promise<void> {
  const { values } = parseArgs({
    args: argv,
    options: {
      images: { type: 'string' },
      captions: { type: 'string' },
      out: { type: 'string' },
      scorer: { type: 'string', default: 'hashed' },
      cache: { type: 'string' },
    },
  });
  if (!values.images || !values.captions || !values.out) {
    throw new Error('score-oracle needs --images, --captions, and --out');
  }
  const imageIds = values.images.startsWith('@')
    ? await readLines(values.images.slice(1))
    : values.images.split(',');
  const captionLines = await readLines(values.captions);
  // captions.tsv from a bundle carries real ids; a plain list gets
  // cap%06d ids over the sorted unique texts
  let captions: Array<{ id: string; text: string }>;
  if (captionLines[0] === 'caption_id\tsubject\trelation\tobject\ttext') {
    captions = captionLines.slice(1).map((line) => {
      const cells = line.split('\t');
      return { id: cells[0], text: cells[4] };
    });
  } else {
    const unique = [...new Set(captionLines)].sort();
    captions = unique.map((text, i) => ({ id: `cap${String(i).padStart(6, '0')}`, text }));
  }

  let scorer: Scorer;
  if (values.scorer === 'hashed') {
    scorer = new HashedScorer();
  } else if (values.scorer === 'remote') {
    const url = process.env.SIMAT_ORACLE_URL;
    if (!url) throw new Error('remote scorer needs SIMAT_ORACLE_URL');
    const remote = new RemoteScorer({ url, cachePath: values.cache });
    await remote.loadCache();
    scorer = remote;
  } else {
    throw new Error(`unknown scorer ${JSON.stringify(values.scorer)}`);
  }

  const warnings: string[] = [];
  const rows: OracleRow[] = [];
  for (const imageId of imageIds) {
    for (const caption of captions) {
      try {
        const p = await scorer.score(imageId, caption.text);
        rows.push({ imageId, caption: caption.id, probability: clampProbability(p, warnings) });
      } catch (error) {
        // per-pair failures are logged and the pair omitted; the engine
        // flags the coverage gap downstream
        console.error(`skipping (${imageId}, ${caption.id}): ${error}`);
      }
    }
  }
  rows.sort((a, b) =>
    a.imageId === b.imageId ? a.caption.localeCompare(b.caption) : a.imageId.localeCompare(b.imageId),
  );
  await fs.writeFile(values.out, formatOracleTsv(rows));
  for (const warning of warnings.slice(0, 5)) console.error(`warning: ${warning}`);
  await writeManifest(values.out + '.job.json', {
    command: 'score-oracle',
    scorer: scorer.name,
    rows: rows.length,
    inputs: { [values.captions]: await digestFile(values.captions) },
    warnings,
    tool_version: TOOL_VERSION,
  });
  console.log(`wrote ${rows.length} scores to ${values.out}`);
}

async function main(): Promise<void> {
  const [command, ...rest] = process.argv.slice(2);
  if (command === 'embed-text') return embedCommand(rest, false);
  if (command === 'embed-words') return embedCommand(rest, true);
  if (command === 'score-oracle') return scoreCommand(rest);
  console.error('usage: exporter <embed-text|embed-words|score-oracle> [flags]');
  process.exit(2);
}

main().catch((error) => {
  console.error(String(error));
  process.exit(1);
});
