#!/usr/bin/env node
/** CLI: `extract` a dataset into GCRF features + manifest; `verify` output. */
import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';

import { DEFAULT_LAYERS, extractDataset } from './extract';
import { verifyOutput } from './verify';

function parseLayers(raw: string | undefined): number[] {
  if (!raw) return DEFAULT_LAYERS;
  return raw.split(',').filter((s) => s.trim()).map((s) => {
    const v = Number(s);
    if (!Number.isInteger(v) || v < 1) throw new Error(`bad layer index ${s}`);
    return v;
  });
}

yargs(hideBin(process.argv))
  .command('extract', 'extract patch features into GCRF + manifest', (y) => y
    .option('dataset-root', { type: 'string', describe: 'MVTec/VisA-layout dataset root' })
    .option('synthetic', { type: 'boolean', default: false,
                           describe: 'use built-in demo images instead of a dataset' })
    .option('out', { type: 'string', demandOption: true })
    .option('layers', { type: 'string', describe: 'comma-separated block indices (default 6)' })
    .option('weights', { type: 'string', describe: 'weights directory (GCRF + weights.json)' })
    .option('seed', { type: 'number', default: 0, describe: 'seed for random weights' })
    .option('config', { type: 'string', default: 'vitb16', describe: 'vitb16 | tiny' })
    .option('categories', { type: 'string', describe: 'comma-separated category subset' }),
  (argv) => {
    if (!argv.synthetic && !argv['dataset-root']) {
      console.error('error: provide --dataset-root or --synthetic');
      process.exit(2);
    }
    const summary = extractDataset({
      datasetRoot: argv.synthetic ? null : (argv['dataset-root'] as string),
      outDir: argv.out as string,
      layers: parseLayers(argv.layers as string | undefined),
      weightsDir: (argv.weights as string | undefined) ?? null,
      seed: argv.seed as number,
      config: argv.config as string,
      categories: argv.categories
        ? (argv.categories as string).split(',').filter((s) => s) : undefined,
    });
    console.log(`extracted ${summary.images} images, D=${summary.D}, `
      + `grid ${summary.grid}x${summary.grid}, categories: ${summary.categories.join(',')}`);
    if (summary.missingMasks.length > 0) {
      console.warn(`warning: ${summary.missingMasks.length} anomalous images lack ground-truth masks`);
    }
  })
  .command('verify', 'audit an extraction directory with an independent parser', (y) => y
    .option('out', { type: 'string', demandOption: true }),
  (argv) => {
    const issues = verifyOutput(argv.out as string);
    if (issues.length === 0) {
      console.log('verify: clean');
    } else {
      for (const issue of issues) console.error(`issue: ${issue}`);
      process.exit(1);
    }
  })
  .demandCommand(1)
  .strict()
  .fail((msg, err) => {
    console.error(`error: ${msg ?? err?.message}`);
    process.exit(err && !msg ? 1 : 2);
  })
  .parse();
