import { createHash } from 'crypto';
import { promises as fs } from 'fs';

export const TOOL_VERSION = '0.1.0';

export interface JobManifest {
  command: string;
  encoder?: string;
  scorer?: string;
  dim?: number;
  normalize?: boolean;
  weighting?: string;
  rows: number;
  inputs: Record<string, string>;
  warnings: string[];
  tool_version: string;
}

export async function digestFile(path: string): Promise<string> {
  const blob = await fs.readFile(path);
  return createHash('sha256').update(blob).digest('hex');
}

export async function writeManifest(outPath: string, manifest: JobManifest): Promise<void> {
  await fs.writeFile(outPath, JSON.stringify(manifest, Object.keys(manifest).sort(), 2) + '\n');
}
