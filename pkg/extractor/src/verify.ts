/**
 * Post-extraction audit: re-read every GCRF with the minimal strict parser
 * and check dimensional and manifest consistency. Returns a flat list of
 * issues; an empty list means the output honors the engine contract.
 */
import * as fs from 'fs';
import * as path from 'path';

import { readTensor } from './gcrf';

export function verifyOutput(outDir: string): string[] {
  const issues: string[] = [];
  const manifestPath = path.join(outDir, 'manifest.jsonl');
  if (!fs.existsSync(manifestPath)) {
    return [`missing manifest ${manifestPath}`];
  }
  const lines = fs.readFileSync(manifestPath, 'utf-8').split('\n').filter((l) => l.trim());
  let expectedD: number | null = null;
  let expectedGrid: string | null = null;
  lines.forEach((line, idx) => {
    const where = `manifest line ${idx + 1}`;
    let row: any;
    try {
      row = JSON.parse(line);
    } catch (e) {
      issues.push(`${where}: invalid JSON`);
      return;
    }
    for (const key of ['image_id', 'category', 'split', 'image_label',
                       'feature_path', 'image_height', 'image_width']) {
      if (!(key in row)) issues.push(`${where}: missing field ${key}`);
    }
    if (row.split === 'train' && row.image_label !== 0) {
      issues.push(`${where}: anomalous image in train split`);
    }
    const featFile = path.join(outDir, row.feature_path ?? '');
    if (!fs.existsSync(featFile)) {
      issues.push(`${where}: missing feature file ${featFile}`);
      return;
    }
    try {
      const t = readTensor(featFile);
      if (t.dims.length !== 3) {
        issues.push(`${where}: feature tensor rank ${t.dims.length}, expected 3`);
      } else {
        const [d, h, w] = t.dims;
        if (expectedD === null) {
          expectedD = d;
          expectedGrid = `${h}x${w}`;
        } else if (d !== expectedD || `${h}x${w}` !== expectedGrid) {
          issues.push(`${where}: dims [${t.dims}] differ from first image `
            + `(D=${expectedD}, grid ${expectedGrid})`);
        }
      }
    } catch (e: any) {
      issues.push(`${where}: ${e.message}`);
    }
    if (row.mask_path) {
      const maskFile = path.join(outDir, row.mask_path);
      if (!fs.existsSync(maskFile)) {
        issues.push(`${where}: missing mask file ${maskFile}`);
      } else {
        try {
          const m = readTensor(maskFile);
          if (m.dims.length !== 2
              || m.dims[0] !== row.image_height || m.dims[1] !== row.image_width) {
            issues.push(`${where}: mask dims [${m.dims}] != `
              + `[${row.image_height}, ${row.image_width}]`);
          }
          for (let i = 0; i < m.data.length; i++) {
            if (m.data[i] !== 0 && m.data[i] !== 1) {
              issues.push(`${where}: mask value ${m.data[i]} at ${i} not in {0,1}`);
              break;
            }
          }
        } catch (e: any) {
          issues.push(`${where}: ${e.message}`);
        }
      }
    }
  });
  if (lines.length === 0) issues.push('manifest is empty');
  return issues;
}
