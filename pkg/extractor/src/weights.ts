/**
 * ViT weight container: seeded deterministic initialization for contract
 * tests, plus persistence as a directory of GCRF tensors with a JSON index
 * (one tensor format across the whole project).
 *
 * Pretrained checkpoints are consumed through the same directory layout;
 * converting them is a one-off reshape into these named tensors.
 */
import * as fs from 'fs';
import * as path from 'path';

import { readTensor, writeTensor } from './gcrf';

export interface ViTConfig {
  name: string;
  imageSize: number;   // input resolution (square)
  patchSize: number;
  width: number;       // token channels C
  heads: number;
  mlpRatio: number;
  depth: number;       // transformer blocks available
}

export const VIT_B16: ViTConfig = {
  name: 'ViT-B/16', imageSize: 224, patchSize: 16, width: 768,
  heads: 12, mlpRatio: 4, depth: 12,
};

// small stand-in with the same grid geometry, for fast tests
export const VIT_TINY: ViTConfig = {
  name: 'ViT-tiny/16', imageSize: 224, patchSize: 16, width: 32,
  heads: 4, mlpRatio: 4, depth: 3,
};

export const CONFIGS: Record<string, ViTConfig> = {
  vitb16: VIT_B16,
  tiny: VIT_TINY,
};

export interface BlockWeights {
  ln1Gain: Float64Array; ln1Bias: Float64Array;
  qkvW: Float64Array;    // (width, 3*width) row-major
  qkvB: Float64Array;
  projW: Float64Array;   // (width, width)
  projB: Float64Array;
  ln2Gain: Float64Array; ln2Bias: Float64Array;
  fc1W: Float64Array;    // (width, mlpRatio*width)
  fc1B: Float64Array;
  fc2W: Float64Array;    // (mlpRatio*width, width)
  fc2B: Float64Array;
}

export interface ViTWeights {
  config: ViTConfig;
  patchW: Float64Array;      // (patchDim, width), patchDim = 3*ps*ps
  clsToken: Float64Array;    // (width,)
  posEmbed: Float64Array;    // ((1+N)*width,)
  lnPreGain: Float64Array;
  lnPreBias: Float64Array;
  blocks: BlockWeights[];
}

export function patchDim(cfg: ViTConfig): number {
  return 3 * cfg.patchSize * cfg.patchSize;
}

export function gridSize(cfg: ViTConfig): number {
  return Math.floor(cfg.imageSize / cfg.patchSize);
}

export function numTokens(cfg: ViTConfig): number {
  const g = gridSize(cfg);
  return g * g;
}

/** mulberry32: tiny deterministic PRNG, stable across platforms. */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function uniformArray(rng: () => number, n: number, scale: number): Float64Array {
  const out = new Float64Array(n);
  for (let i = 0; i < n; i++) out[i] = Math.fround((rng() * 2 - 1) * scale);
  return out;
}

function onesArray(n: number): Float64Array {
  return new Float64Array(n).fill(1);
}

/** Deterministic random weights (for shape/contract testing, not accuracy). */
export function randomWeights(cfg: ViTConfig, seed: number): ViTWeights {
  const rng = mulberry32(seed);
  const w = cfg.width;
  const tokens = 1 + numTokens(cfg);
  const s = 0.06;
  const block = (): BlockWeights => ({
    ln1Gain: onesArray(w), ln1Bias: new Float64Array(w),
    qkvW: uniformArray(rng, w * 3 * w, s), qkvB: uniformArray(rng, 3 * w, s),
    projW: uniformArray(rng, w * w, s), projB: uniformArray(rng, w, s),
    ln2Gain: onesArray(w), ln2Bias: new Float64Array(w),
    fc1W: uniformArray(rng, w * cfg.mlpRatio * w, s),
    fc1B: uniformArray(rng, cfg.mlpRatio * w, s),
    fc2W: uniformArray(rng, cfg.mlpRatio * w * w, s),
    fc2B: uniformArray(rng, w, s),
  });
  return {
    config: cfg,
    patchW: uniformArray(rng, patchDim(cfg) * w, s),
    clsToken: uniformArray(rng, w, s),
    posEmbed: uniformArray(rng, tokens * w, s),
    lnPreGain: onesArray(w),
    lnPreBias: new Float64Array(w),
    blocks: Array.from({ length: cfg.depth }, block),
  };
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

function f32(a: Float64Array): Float32Array {
  return Float32Array.from(a);
}

function f64(a: Float32Array): Float64Array {
  return Float64Array.from(a);
}

export function saveWeights(weights: ViTWeights, dir: string): void {
  fs.mkdirSync(dir, { recursive: true });
  const cfg = weights.config;
  const w = cfg.width;
  const entries: Array<[string, number[], Float64Array]> = [
    ['patch_weight', [patchDim(cfg), w], weights.patchW],
    ['cls_token', [w], weights.clsToken],
    ['pos_embed', [1 + numTokens(cfg), w], weights.posEmbed],
    ['ln_pre_gain', [w], weights.lnPreGain],
    ['ln_pre_bias', [w], weights.lnPreBias],
  ];
  weights.blocks.forEach((b, i) => {
    const p = `block${String(i + 1).padStart(2, '0')}`;
    entries.push(
      [`${p}_ln1_gain`, [w], b.ln1Gain], [`${p}_ln1_bias`, [w], b.ln1Bias],
      [`${p}_qkv_weight`, [w, 3 * w], b.qkvW], [`${p}_qkv_bias`, [3 * w], b.qkvB],
      [`${p}_proj_weight`, [w, w], b.projW], [`${p}_proj_bias`, [w], b.projB],
      [`${p}_ln2_gain`, [w], b.ln2Gain], [`${p}_ln2_bias`, [w], b.ln2Bias],
      [`${p}_fc1_weight`, [w, cfg.mlpRatio * w], b.fc1W],
      [`${p}_fc1_bias`, [cfg.mlpRatio * w], b.fc1B],
      [`${p}_fc2_weight`, [cfg.mlpRatio * w, w], b.fc2W],
      [`${p}_fc2_bias`, [w], b.fc2B],
    );
  });
  for (const [name, dims, data] of entries) {
    writeTensor(path.join(dir, `${name}.gcrf`), dims, f32(data));
  }
  fs.writeFileSync(path.join(dir, 'weights.json'),
    JSON.stringify({ config: cfg, tensors: entries.map(([n]) => n) }, null, 1));
}

export function loadWeights(dir: string): ViTWeights {
  const metaPath = path.join(dir, 'weights.json');
  if (!fs.existsSync(metaPath)) throw new Error(`missing ${metaPath}`);
  const meta = JSON.parse(fs.readFileSync(metaPath, 'utf-8'));
  const cfg: ViTConfig = meta.config;
  const load = (name: string) => f64(readTensor(path.join(dir, `${name}.gcrf`)).data);
  const blocks: BlockWeights[] = [];
  for (let i = 1; i <= cfg.depth; i++) {
    const p = `block${String(i).padStart(2, '0')}`;
    blocks.push({
      ln1Gain: load(`${p}_ln1_gain`), ln1Bias: load(`${p}_ln1_bias`),
      qkvW: load(`${p}_qkv_weight`), qkvB: load(`${p}_qkv_bias`),
      projW: load(`${p}_proj_weight`), projB: load(`${p}_proj_bias`),
      ln2Gain: load(`${p}_ln2_gain`), ln2Bias: load(`${p}_ln2_bias`),
      fc1W: load(`${p}_fc1_weight`), fc1B: load(`${p}_fc1_bias`),
      fc2W: load(`${p}_fc2_weight`), fc2B: load(`${p}_fc2_bias`),
    });
  }
  return {
    config: cfg,
    patchW: load('patch_weight'),
    clsToken: load('cls_token'),
    posEmbed: load('pos_embed'),
    lnPreGain: load('ln_pre_gain'),
    lnPreBias: load('ln_pre_bias'),
    blocks,
  };
}
