/**
 * Cross-component contract: full-size ViT-B/16 extraction must emit
 * (768*|layers|, 14, 14) tensors that the anomaly engine parses and consumes
 * with zero warnings, and repeat extraction must be byte-identical.
 * The engine is exercised only through its CLI and file formats.
 */
import { execFileSync } from 'child_process';
import * as fs from 'fs';
import * as os from 'os';
import * as path from 'path';
import { PNG } from 'pngjs';
import { describe, expect, it } from 'vitest';

import { extractDataset } from '../src/extract';
import { readTensor } from '../src/gcrf';
import { verifyOutput } from '../src/verify';

function tmpDir(prefix: string): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), prefix));
}

function writePng(file: string, size: number, pixel: (x: number, y: number) => number[]): void {
  const png = new PNG({ width: size, height: size });
  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) {
      const [r, g, b] = pixel(x, y);
      const i = (y * size + x) * 4;
      png.data[i] = r; png.data[i + 1] = g; png.data[i + 2] = b; png.data[i + 3] = 255;
    }
  }
  fs.mkdirSync(path.dirname(file), { recursive: true });
  fs.writeFileSync(file, PNG.sync.write(png));
}

function engineCli(): string[] | null {
  try {
    execFileSync('gcr', ['--help'], { stdio: 'pipe' });
    return ['gcr'];
  } catch {
    try {
      execFileSync('python3', ['-m', 'gcr.cli', '--help'], { stdio: 'pipe' });
      return ['python3', '-m', 'gcr.cli'];
    } catch {
      return null;
    }
  }
}

function runEngine(cli: string[], args: string[]): { stdout: string; stderr: string } {
  const [cmd, ...prefix] = cli;
  const out = execFileSync(cmd, [...prefix, ...args], { stdio: 'pipe' });
  return { stdout: out.toString(), stderr: '' };
}

function miniTree(root: string): void {
  writePng(path.join(root, 'widget', 'train', 'good', '000.png'), 96,
    (x, y) => [((x * 7) % 200) + 20, (y * 5) % 255, ((x + y) * 3) % 255]);
  writePng(path.join(root, 'widget', 'test', 'dent', '000.png'), 96,
    (x, y) => (x > 30 && x < 60 && y > 30 && y < 60) ? [250, 250, 250]
      : [((x * 7) % 200) + 20, (y * 5) % 255, ((x + y) * 3) % 255]);
  writePng(path.join(root, 'widget', 'ground_truth', 'dent', '000_mask.png'), 96,
    (x, y) => (x > 30 && x < 60 && y > 30 && y < 60) ? [255, 255, 255] : [0, 0, 0]);
}

describe('ViT-B/16 engine contract', () => {
  it('emits (768, 14, 14), repeats byte-identically, and feeds the engine', () => {
    const root = tmpDir('b16data-');
    miniTree(root);
    const outA = tmpDir('b16a-');
    const outB = tmpDir('b16b-');
    for (const out of [outA, outB]) {
      const summary = extractDataset({
        datasetRoot: root, outDir: out, layers: [6],
        weightsDir: null, seed: 5, config: 'vitb16',
      });
      expect(summary.images).toBe(2);
      expect(summary.D).toBe(768);
      expect(summary.grid).toBe(14);
    }
    // tensor shape straight off the engine format
    const rows = fs.readFileSync(path.join(outA, 'manifest.jsonl'), 'utf-8')
      .trim().split('\n').map((l) => JSON.parse(l));
    for (const row of rows) {
      expect(readTensor(path.join(outA, row.feature_path)).dims).toEqual([768, 14, 14]);
    }
    // repeat extraction byte-identical
    for (const sub of ['features', 'masks']) {
      for (const f of fs.readdirSync(path.join(outA, sub))) {
        expect(fs.readFileSync(path.join(outA, sub, f))
          .equals(fs.readFileSync(path.join(outB, sub, f)))).toBe(true);
      }
    }
    expect(fs.readFileSync(path.join(outA, 'manifest.jsonl'))
      .equals(fs.readFileSync(path.join(outB, 'manifest.jsonl')))).toBe(true);
    expect(verifyOutput(outA)).toEqual([]);

    // the engine consumes the output through its own CLI, zero warnings
    const cli = engineCli();
    expect(cli, 'anomaly engine CLI must be installed for the contract test').not.toBeNull();
    const banks = tmpDir('b16banks-');
    const build = runEngine(cli!, ['build-bank',
      '--manifest', path.join(outA, 'manifest.jsonl'),
      '--category', 'widget', '--K', '16', '--seed', '1', '--out', banks]);
    expect(build.stdout).toMatch(/built bank widget: K=16 D=768/);
    const score = runEngine(cli!, ['score',
      '--image-features', path.join(outA, rows[1].feature_path),
      '--banks', banks, '--height', '224', '--width', '224']);
    expect(score.stdout).toMatch(/routed: widget/);
    expect(score.stdout).toMatch(/image_score: /);
  }, 300_000);
});
