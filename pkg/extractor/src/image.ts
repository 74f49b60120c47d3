/**
 * Image loading and preprocessing: PNG decode, bicubic shorter-side resize,
 * center crop, channel normalization (the visual tower's own pipeline).
 * Masks resize with nearest neighbor and binarize.
 */
import * as fs from 'fs';
import { PNG } from 'pngjs';

export const CLIP_MEAN = [0.48145466, 0.4578275, 0.40821073];
export const CLIP_STD = [0.26862954, 0.26130258, 0.27577711];

export interface RgbImage {
  width: number;
  height: number;
  data: Float64Array; // (3, H, W), values in [0, 1]
}

export function decodePng(path: string): RgbImage {
  const png = PNG.sync.read(fs.readFileSync(path));
  const { width, height } = png;
  const out = new Float64Array(3 * width * height);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const src = (y * width + x) * 4;
      for (let c = 0; c < 3; c++) {
        out[c * width * height + y * width + x] = png.data[src + c] / 255;
      }
    }
  }
  return { width, height, data: out };
}

function cubicKernel(t: number): number {
  // Catmull-Rom style cubic with a = -0.5 (PIL's bicubic)
  const a = -0.5;
  const x = Math.abs(t);
  if (x <= 1) return (a + 2) * x * x * x - (a + 3) * x * x + 1;
  if (x < 2) return a * x * x * x - 5 * a * x * x + 8 * a * x - 4 * a;
  return 0;
}

function resizeChannelBicubic(src: Float64Array, sw: number, sh: number,
                              dw: number, dh: number, out: Float64Array): void {
  const sx = sw / dw;
  const sy = sh / dh;
  for (let y = 0; y < dh; y++) {
    const fy = (y + 0.5) * sy - 0.5;
    const y0 = Math.floor(fy);
    for (let x = 0; x < dw; x++) {
      const fx = (x + 0.5) * sx - 0.5;
      const x0 = Math.floor(fx);
      let acc = 0;
      let wsum = 0;
      for (let j = -1; j <= 2; j++) {
        const yy = Math.min(sh - 1, Math.max(0, y0 + j));
        const wy = cubicKernel(fy - (y0 + j));
        for (let i = -1; i <= 2; i++) {
          const xx = Math.min(sw - 1, Math.max(0, x0 + i));
          const wgt = wy * cubicKernel(fx - (x0 + i));
          acc += wgt * src[yy * sw + xx];
          wsum += wgt;
        }
      }
      out[y * dw + x] = acc / wsum;
    }
  }
}

/** Shorter-side resize to `target`, center crop to target x target. */
export function resizeCenterCrop(img: RgbImage, target: number): RgbImage {
  const scale = target / Math.min(img.width, img.height);
  const rw = Math.max(target, Math.round(img.width * scale));
  const rh = Math.max(target, Math.round(img.height * scale));
  const resized = new Float64Array(3 * rw * rh);
  for (let c = 0; c < 3; c++) {
    resizeChannelBicubic(
      img.data.subarray(c * img.width * img.height, (c + 1) * img.width * img.height),
      img.width, img.height, rw, rh,
      resized.subarray(c * rw * rh, (c + 1) * rw * rh));
  }
  const ox = Math.floor((rw - target) / 2);
  const oy = Math.floor((rh - target) / 2);
  const out = new Float64Array(3 * target * target);
  for (let c = 0; c < 3; c++) {
    for (let y = 0; y < target; y++) {
      for (let x = 0; x < target; x++) {
        out[c * target * target + y * target + x] =
          resized[c * rw * rh + (y + oy) * rw + (x + ox)];
      }
    }
  }
  return { width: target, height: target, data: out };
}

/** Normalized (3, S, S) float32 tensor ready for the tower. */
export function preprocess(img: RgbImage, target: number): Float32Array {
  const sized = img.width === target && img.height === target
    ? img : resizeCenterCrop(img, target);
  const hw = target * target;
  const out = new Float32Array(3 * hw);
  for (let c = 0; c < 3; c++) {
    for (let i = 0; i < hw; i++) {
      out[c * hw + i] = Math.fround((sized.data[c * hw + i] - CLIP_MEAN[c]) / CLIP_STD[c]);
    }
  }
  return out;
}

/** Grayscale mask -> {0,1} floats at target x target (nearest neighbor). */
export function loadMaskPng(path: string, target: number): Float32Array {
  const png = PNG.sync.read(fs.readFileSync(path));
  const out = new Float32Array(target * target);
  for (let y = 0; y < target; y++) {
    const sy = Math.min(png.height - 1, Math.floor((y + 0.5) * png.height / target));
    for (let x = 0; x < target; x++) {
      const sx = Math.min(png.width - 1, Math.floor((x + 0.5) * png.width / target));
      out[y * target + x] = png.data[(sy * png.width + sx) * 4] > 127 ? 1 : 0;
    }
  }
  return out;
}
