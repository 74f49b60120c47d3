/**
 * Dataset extraction: run the frozen tower over every image, write one GCRF
 * feature tensor per image plus {0,1} mask tensors, and emit the engine's
 * JSON-lines manifest. The tower is in eval mode by construction (there is
 * no training path), so repeat extraction is byte-identical.
 */
import * as fs from 'fs';
import * as path from 'path';

import { walkDataset } from './dataset';
import { writeTensor } from './gcrf';
import { RgbImage, decodePng, loadMaskPng, preprocess } from './image';
import { extractFeatures } from './vit';
import { CONFIGS, ViTWeights, gridSize, loadWeights, randomWeights } from './weights';

export interface ExtractorConfig {
  datasetRoot: string | null;  // null -> built-in synthetic demo images
  outDir: string;
  layers: number[];
  weightsDir: string | null;   // null -> seeded random weights (contract mode)
  seed: number;
  config: string;              // key into CONFIGS
  categories?: string[];
}

export const DEFAULT_LAYERS = [6];

export interface ExtractionSummary {
  images: number;
  categories: string[];
  D: number;
  grid: number;
  missingMasks: string[];
}

interface WorkItem {
  imageId: string;
  category: string;
  split: 'train' | 'test';
  label: 0 | 1;
  image: () => RgbImage;
  mask: ((target: number) => Float32Array) | null;
}

function resolveWeights(cfg: ExtractorConfig): ViTWeights {
  const vit = CONFIGS[cfg.config];
  if (!vit) throw new Error(`unknown model config ${cfg.config}; known: ${Object.keys(CONFIGS)}`);
  if (vit.imageSize % vit.patchSize !== 0) {
    throw new Error('resolution does not tile into the patch grid');
  }
  if (cfg.weightsDir) {
    const w = loadWeights(cfg.weightsDir);
    if (w.config.name !== vit.name) {
      throw new Error(`weights are for ${w.config.name}, requested ${vit.name}`);
    }
    return w;
  }
  return randomWeights(vit, cfg.seed);
}

/** Deterministic gradient images for the no-dataset demo path. */
function syntheticItems(): WorkItem[] {
  const size = 224;
  const items: WorkItem[] = [];
  for (let cat = 0; cat < 2; cat++) {
    const name = `demo${cat}`;
    for (const [split, count] of [['train', 2], ['test', 2]] as const) {
      for (let i = 0; i < count; i++) {
        const anomalous = split === 'test' && i % 2 === 1;
        items.push({
          imageId: `${name}_${split}_${i}`,
          category: name,
          split,
          label: anomalous ? 1 : 0,
          image: () => {
            const data = new Float64Array(3 * size * size);
            for (let c = 0; c < 3; c++) {
              for (let y = 0; y < size; y++) {
                for (let x = 0; x < size; x++) {
                  const v = cat === 0
                    ? (x + y) / (2 * size)
                    : Math.abs(Math.sin((x * (c + 1)) / 23)) * (y / size);
                  data[c * size * size + y * size + x] = v;
                }
              }
            }
            if (anomalous) {
              for (let y = 60; y < 120; y++) {
                for (let x = 80; x < 140; x++) {
                  for (let c = 0; c < 3; c++) data[c * size * size + y * size + x] = 1.0;
                }
              }
            }
            return { width: size, height: size, data };
          },
          mask: split === 'test'
            ? (target: number) => {
              const m = new Float32Array(target * target);
              if (anomalous) {
                for (let y = 60; y < 120; y++) {
                  for (let x = 80; x < 140; x++) m[y * target + x] = 1;
                }
              }
              return m;
            }
            : null,
        });
      }
    }
  }
  return items;
}

function datasetItems(cfg: ExtractorConfig): WorkItem[] {
  return walkDataset(cfg.datasetRoot!, cfg.categories).map((e) => ({
    imageId: e.imageId,
    category: e.category,
    split: e.split,
    label: e.label,
    image: () => decodePng(e.imagePath),
    mask: e.split === 'test'
      ? (target: number) => e.maskPath
        ? loadMaskPng(e.maskPath, target)
        : new Float32Array(target * target)  // normal test image: empty mask
      : null,
  }));
}

export function extractDataset(cfg: ExtractorConfig): ExtractionSummary {
  const weights = resolveWeights(cfg);
  const vit = weights.config;
  const layers = cfg.layers.length > 0 ? cfg.layers : DEFAULT_LAYERS;
  const grid = gridSize(vit);
  const target = vit.imageSize;
  const items = cfg.datasetRoot === null ? syntheticItems() : datasetItems(cfg);

  fs.mkdirSync(path.join(cfg.outDir, 'features'), { recursive: true });
  fs.mkdirSync(path.join(cfg.outDir, 'masks'), { recursive: true });
  const rows: string[] = [];
  const categories = new Set<string>();
  const missingMasks: string[] = [];
  let d = 0;
  for (const item of items) {
    categories.add(item.category);
    const pixels = preprocess(item.image(), target);
    const feat = extractFeatures(pixels, weights, layers);
    d = feat.dims[0];
    const featurePath = `features/${item.imageId}.gcrf`;
    writeTensor(path.join(cfg.outDir, featurePath), feat.dims, feat.data);
    let maskPath: string | null = null;
    if (item.mask) {
      maskPath = `masks/${item.imageId}.gcrf`;
      writeTensor(path.join(cfg.outDir, maskPath), [target, target], item.mask(target));
    } else if (item.split === 'test' && item.label === 1) {
      missingMasks.push(item.imageId);
    }
    rows.push(JSON.stringify({
      image_id: item.imageId,
      category: item.category,
      split: item.split,
      image_label: item.label,
      feature_path: featurePath,
      mask_path: maskPath,
      image_height: target,
      image_width: target,
    }));
  }
  fs.writeFileSync(path.join(cfg.outDir, 'manifest.jsonl'), rows.join('\n') + '\n');
  fs.writeFileSync(path.join(cfg.outDir, 'extraction.json'), JSON.stringify({
    model: vit.name,
    layers,
    weights: cfg.weightsDir ?? `seeded-random(seed=${cfg.seed})`,
    grid: [grid, grid],
    D: d,
    images: items.length,
  }, null, 1));
  return {
    images: items.length,
    categories: [...categories].sort(),
    D: d,
    grid,
    missingMasks,
  };
}
