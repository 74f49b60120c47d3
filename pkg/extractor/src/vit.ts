/**
 * Frozen ViT visual tower with block-output recording.
 *
 * Forward pass: patchify (strided conv as matmul), prepend the class token,
 * add positional embeddings, pre-LN, then pre-norm transformer blocks
 * (LN -> MHA -> residual; LN -> QuickGELU MLP -> residual). The hidden
 * state after each requested block is recorded; the class token is dropped
 * and the N patch tokens are reshaped to the H' x W' grid. Multiple
 * recorded layers concatenate along the channel dimension, so the exported
 * tensor is (sum of widths, H', W').
 */
import { Mat, addInPlace, fromF32, layerNorm, matmul, quickGeluInPlace,
         softmaxRows, toF32, zeros } from './tensor';
import { ViTConfig, ViTWeights, gridSize, numTokens, patchDim } from './weights';

function asMat(rows: number, cols: number, data: Float64Array): Mat {
  if (data.length !== rows * cols) {
    throw new Error(`weight shape mismatch: ${rows}x${cols} vs ${data.length}`);
  }
  return { rows, cols, data };
}

/** (3, S, S) image -> (N, patchDim) rows in (channel, dy, dx) order. */
export function patchify(image: Float32Array, cfg: ViTConfig): Mat {
  const s = cfg.imageSize;
  const ps = cfg.patchSize;
  const g = gridSize(cfg);
  if (image.length !== 3 * s * s) {
    throw new Error(`image must be (3, ${s}, ${s}), got ${image.length} values`);
  }
  const out = zeros(g * g, patchDim(cfg));
  for (let py = 0; py < g; py++) {
    for (let px = 0; px < g; px++) {
      const row = (py * g + px) * patchDim(cfg);
      let col = 0;
      for (let c = 0; c < 3; c++) {
        for (let dy = 0; dy < ps; dy++) {
          const base = c * s * s + (py * ps + dy) * s + px * ps;
          for (let dx = 0; dx < ps; dx++) {
            out.data[row + col++] = image[base + dx];
          }
        }
      }
    }
  }
  return out;
}

function attention(x: Mat, w: ViTWeights, blockIdx: number): Mat {
  const cfg = w.config;
  const b = w.blocks[blockIdx];
  const width = cfg.width;
  const heads = cfg.heads;
  const dh = width / heads;
  const t = x.rows;
  const qkv = matmul(x, asMat(width, 3 * width, b.qkvW), b.qkvB);
  const scale = 1 / Math.sqrt(dh);
  const merged = zeros(t, width);
  for (let h = 0; h < heads; h++) {
    const q = zeros(t, dh);
    const k = zeros(t, dh);
    const v = zeros(t, dh);
    for (let i = 0; i < t; i++) {
      const src = i * 3 * width + h * dh;
      for (let j = 0; j < dh; j++) {
        q.data[i * dh + j] = qkv.data[src + j] * scale;
        k.data[i * dh + j] = qkv.data[src + width + j];
        v.data[i * dh + j] = qkv.data[src + 2 * width + j];
      }
    }
    // scores = q k^T, then row softmax, then @ated v
    const scores = zeros(t, t);
    for (let i = 0; i < t; i++) {
      for (let j = 0; j < t; j++) {
        let acc = 0;
        for (let d = 0; d < dh; d++) acc += q.data[i * dh + d] * k.data[j * dh + d];
        scores.data[i * t + j] = acc;
      }
    }
    softmaxRows(scores);
    const ctx = matmul(scores, v);
    for (let i = 0; i < t; i++) {
      for (let j = 0; j < dh; j++) {
        merged.data[i * width + h * dh + j] = ctx.data[i * dh + j];
      }
    }
  }
  return matmul(merged, asMat(width, width, b.projW), b.projB);
}

function mlp(x: Mat, w: ViTWeights, blockIdx: number): Mat {
  const cfg = w.config;
  const b = w.blocks[blockIdx];
  const hidden = matmul(x, asMat(cfg.width, cfg.mlpRatio * cfg.width, b.fc1W), b.fc1B);
  quickGeluInPlace(hidden);
  return matmul(hidden, asMat(cfg.mlpRatio * cfg.width, cfg.width, b.fc2W), b.fc2B);
}

export interface ForwardResult {
  /** recorded hidden states keyed by block index (1-based), (1+N, width) */
  recorded: Map<number, Mat>;
}

export function forward(image: Float32Array, w: ViTWeights,
                        recordLayers: number[]): ForwardResult {
  const cfg = w.config;
  const bad = recordLayers.filter((l) => l < 1 || l > cfg.depth || !Number.isInteger(l));
  if (bad.length > 0 || recordLayers.length === 0) {
    throw new Error(`layer indices must be integers in 1..${cfg.depth}, got [${recordLayers}]`);
  }
  const n = numTokens(cfg);
  const width = cfg.width;
  const patches = matmul(patchify(image, cfg), asMat(patchDim(cfg), width, w.patchW));
  let x = zeros(1 + n, width);
  for (let j = 0; j < width; j++) {
    x.data[j] = w.clsToken[j] + w.posEmbed[j];
  }
  for (let p = 0; p < n; p++) {
    const dst = (1 + p) * width;
    for (let j = 0; j < width; j++) {
      x.data[dst + j] = patches.data[p * width + j] + w.posEmbed[dst + j];
    }
  }
  x = layerNorm(x, w.lnPreGain, w.lnPreBias);

  const wanted = new Set(recordLayers);
  const recorded = new Map<number, Mat>();
  const maxLayer = Math.max(...recordLayers);
  for (let blk = 0; blk < maxLayer; blk++) {
    const attnOut = attention(layerNorm(x, w.blocks[blk].ln1Gain, w.blocks[blk].ln1Bias),
                              w, blk);
    addInPlace(x, attnOut);
    const mlpOut = mlp(layerNorm(x, w.blocks[blk].ln2Gain, w.blocks[blk].ln2Bias),
                       w, blk);
    addInPlace(x, mlpOut);
    if (wanted.has(blk + 1)) {
      recorded.set(blk + 1, { rows: x.rows, cols: x.cols, data: x.data.slice() });
    }
  }
  return { recorded };
}

/**
 * Full extraction for one image: record, drop the class token, reshape each
 * layer's N tokens to the grid, concatenate channels. Returns the
 * channel-major (D, H', W') tensor with D = width * |layers|.
 */
export function extractFeatures(image: Float32Array, w: ViTWeights,
                                layers: number[]): { dims: number[]; data: Float32Array } {
  const cfg = w.config;
  const g = gridSize(cfg);
  const n = numTokens(cfg);
  const width = cfg.width;
  const { recorded } = forward(image, w, layers);
  const d = width * layers.length;
  const out = new Float32Array(d * g * g);
  layers.forEach((layer, li) => {
    const tokens = recorded.get(layer)!;
    // token p = 1 + (u * g + v): row-major spatial, class token dropped
    for (let c = 0; c < width; c++) {
      const channel = li * width + c;
      for (let p = 0; p < n; p++) {
        out[channel * n + p] = Math.fround(tokens.data[(1 + p) * width + c]);
      }
    }
  });
  return { dims: [d, g, g], data: out };
}
