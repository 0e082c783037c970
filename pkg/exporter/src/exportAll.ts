/**
 * Export everything the drift library's acceptance suite consumes:
 * the fixture model record, a trace over the fixture's own images, a trace
 * over standard-normal noise, and a JSON cross-check of per-channel batch
 * means computed through the framework's own reductions.
 */

import { existsSync, mkdirSync, readFileSync, writeFileSync } from 'node:fs';
import { fileURLToPath } from 'node:url';
import { dirname, join } from 'node:path';

import * as tf from '@tensorflow/tfjs';

import { exportModel, exportTrace } from './export.js';
import { makeFixture } from './fixture.js';
import { loadModelFromDir, traceBnInputs } from './model.js';
import { parseNpy } from './npy.js';
import { readdirSync } from 'node:fs';

const here = dirname(fileURLToPath(import.meta.url));
const fixtures = join(here, '..', 'fixtures');
const out = join(here, '..', 'out');
mkdirSync(out, { recursive: true });

if (!existsSync(join(fixtures, 'checkpoint', 'model.json'))) {
  console.error('building fixture checkpoint first');
  await makeFixture(fixtures);
}

const checkpoint = join(fixtures, 'checkpoint');
const batchSize = 16;
const batches = 2;

const modelManifest = await exportModel(checkpoint, join(out, 'fixture_model.mdet'), 'fixture');
console.error(`model:  ${modelManifest.outputPath} (${modelManifest.bnLayers.length} BN layers)`);

const traceManifest = await exportTrace(
  checkpoint,
  join(fixtures, 'images'),
  batchSize,
  batches,
  join(out, 'fixture_trace.mdet'),
  'fixture-images',
  'fixture',
);
console.error(`trace:  ${traceManifest.outputPath} (${traceManifest.sampleCount} samples)`);

const noiseManifest = await exportTrace(
  checkpoint,
  join(fixtures, 'noise'),
  batchSize,
  batches,
  join(out, 'noise_trace.mdet'),
  'noise-images',
  'fixture',
);
console.error(`noise:  ${noiseManifest.outputPath}`);

// cross-check: per-channel means of the first batch, straight from tf ops
const model = await loadModelFromDir(checkpoint);
const names = readdirSync(join(fixtures, 'images'))
  .filter((n) => n.endsWith('.npy'))
  .sort()
  .slice(0, batchSize);
const size = 12;
const flat = new Float32Array(batchSize * size * size);
names.forEach((name, i) => {
  const arr = parseNpy(readFileSync(join(fixtures, 'images', name)));
  for (let k = 0; k < size * size; k++) flat[i * size * size + k] = arr.data[k];
});
const input = tf.tensor4d(flat, [batchSize, size, size, 1]);
const captures = traceBnInputs(model, input);
const batchMeans = captures.map((cap) => {
  const mean = tf.mean(cap.input, [0, 2, 3]);
  const values = Array.from(mean.dataSync());
  mean.dispose();
  cap.input.dispose();
  return values;
});
input.dispose();
writeFileSync(join(out, 'crosscheck.json'), JSON.stringify({ batch_means: batchMeans }));
console.error(`crosscheck: ${join(out, 'crosscheck.json')}`);
