/**
 * Dataset walking for the MVTec/VisA folder layout:
 *
 *   root/<category>/train/good/*.png
 *   root/<category>/test/<defect_type>/*.png     ("good" = normal)
 *   root/<category>/ground_truth/<defect_type>/<stem>_mask.png
 */
import * as fs from 'fs';
import * as path from 'path';

export interface ImageEntry {
  imageId: string;
  category: string;
  split: 'train' | 'test';
  label: 0 | 1;
  imagePath: string;
  maskPath: string | null;
}

function pngsIn(dir: string): string[] {
  if (!fs.existsSync(dir)) return [];
  return fs.readdirSync(dir).filter((f) => f.toLowerCase().endsWith('.png')).sort();
}

function subdirs(dir: string): string[] {
  if (!fs.existsSync(dir)) return [];
  return fs.readdirSync(dir)
    .filter((f) => fs.statSync(path.join(dir, f)).isDirectory()).sort();
}

export function walkDataset(root: string, categories?: string[]): ImageEntry[] {
  const cats = categories && categories.length > 0 ? categories : subdirs(root);
  if (cats.length === 0) throw new Error(`no categories under ${root}`);
  const entries: ImageEntry[] = [];
  for (const cat of cats) {
    const catDir = path.join(root, cat);
    if (!fs.existsSync(catDir)) throw new Error(`missing category directory ${catDir}`);
    for (const file of pngsIn(path.join(catDir, 'train', 'good'))) {
      entries.push({
        imageId: `${cat}_train_good_${path.parse(file).name}`,
        category: cat, split: 'train', label: 0,
        imagePath: path.join(catDir, 'train', 'good', file),
        maskPath: null,
      });
    }
    for (const defect of subdirs(path.join(catDir, 'test'))) {
      for (const file of pngsIn(path.join(catDir, 'test', defect))) {
        const stem = path.parse(file).name;
        const anomalous = defect !== 'good';
        let maskPath: string | null = null;
        if (anomalous) {
          const candidate = path.join(catDir, 'ground_truth', defect, `${stem}_mask.png`);
          if (fs.existsSync(candidate)) maskPath = candidate;
        }
        entries.push({
          imageId: `${cat}_test_${defect}_${stem}`,
          category: cat, split: 'test', label: anomalous ? 1 : 0,
          imagePath: path.join(catDir, 'test', defect, file),
          maskPath,
        });
      }
    }
  }
  if (entries.length === 0) throw new Error(`no images found under ${root}`);
  return entries;
}
