/**
 * Deterministic 2-BN fixture: a small convolutional checkpoint plus image
 * folders, used by the tests here and by the drift library's acceptance
 * suite. All randomness flows from one mulberry32 stream, and the BN moving
 * statistics are calibrated against the fixture images so the checkpoint
 * behaves like a converged model on that data.
 */

import { mkdirSync, writeFileSync } from 'node:fs';
import { join } from 'node:path';

import * as tf from '@tensorflow/tfjs';

import { saveModelToDir, traceBnInputs } from './model.js';
import { encodeNpy } from './npy.js';

export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function gaussian(rand: () => number): () => number {
  let spare: number | null = null;
  return () => {
    if (spare !== null) {
      const v = spare;
      spare = null;
      return v;
    }
    let u = 0;
    let v = 0;
    while (u === 0) u = rand();
    v = rand();
    const mag = Math.sqrt(-2.0 * Math.log(u));
    spare = mag * Math.sin(2.0 * Math.PI * v);
    return mag * Math.cos(2.0 * Math.PI * v);
  };
}

export const FIXTURE_SIZE = 12;
export const FIXTURE_IMAGES = 32;

export function buildFixtureModel(seed = 41): tf.LayersModel {
  const rand = mulberry32(seed);
  const normal = gaussian(rand);
  const model = tf.sequential({
    layers: [
      tf.layers.conv2d({
        inputShape: [FIXTURE_SIZE, FIXTURE_SIZE, 1],
        filters: 6,
        kernelSize: 3,
        padding: 'same',
        useBias: true,
      }),
      tf.layers.batchNormalization({ momentum: 0.9, epsilon: 1e-5 }),
      tf.layers.activation({ activation: 'relu' }),
      tf.layers.averagePooling2d({ poolSize: 2 }),
      tf.layers.conv2d({ filters: 12, kernelSize: 3, padding: 'same', useBias: true }),
      tf.layers.batchNormalization({ momentum: 0.9, epsilon: 1e-5 }),
      tf.layers.activation({ activation: 'relu' }),
      tf.layers.averagePooling2d({ poolSize: 2 }),
      tf.layers.flatten(),
      tf.layers.dense({ units: 3 }),
    ],
  });
  for (const layer of model.layers) {
    const weights = layer.getWeights();
    if (weights.length === 0) continue;
    const replaced = weights.map((w, i) => {
      const n = w.size;
      const data = new Float32Array(n);
      if (layer.getClassName() === 'BatchNormalization') {
        // gamma, beta, movingMean, movingVariance
        const fills = [1.0, 0.0, 0.0, 1.0];
        data.fill(fills[i]);
        if (i === 0) for (let k = 0; k < n; k++) data[k] = 0.8 + 0.4 * rand();
        if (i === 1) for (let k = 0; k < n; k++) data[k] = 0.5 * (rand() - 0.5);
      } else {
        const fanIn = w.shape.length > 1 ? w.shape.slice(0, -1).reduce((a, b) => a * (b ?? 1), 1) : n;
        const scale = Math.sqrt(2.0 / fanIn);
        for (let k = 0; k < n; k++) data[k] = scale * normal();
      }
      return tf.tensor(data, w.shape as number[]);
    });
    layer.setWeights(replaced);
  }
  return model;
}

export function fixtureImages(seed = 42, count = FIXTURE_IMAGES): Float32Array[] {
  const rand = mulberry32(seed);
  const normal = gaussian(rand);
  const images: Float32Array[] = [];
  for (let i = 0; i < count; i++) {
    const img = new Float32Array(FIXTURE_SIZE * FIXTURE_SIZE);
    const theta = Math.PI * (i % 4) / 4;
    const phase = 2 * Math.PI * rand();
    for (let y = 0; y < FIXTURE_SIZE; y++) {
      for (let x = 0; x < FIXTURE_SIZE; x++) {
        const carrier = (2 * Math.PI * 2 * (x * Math.cos(theta) + y * Math.sin(theta))) / FIXTURE_SIZE;
        let v = 0.5 + 0.25 * Math.sin(carrier + phase) + 0.05 * normal();
        img[y * FIXTURE_SIZE + x] = Math.fround(Math.min(1, Math.max(0, v)));
      }
    }
    images.push(img);
  }
  return images;
}

export function noiseImages(seed = 43, count = FIXTURE_IMAGES): Float32Array[] {
  const normal = gaussian(mulberry32(seed));
  const images: Float32Array[] = [];
  for (let i = 0; i < count; i++) {
    const img = new Float32Array(FIXTURE_SIZE * FIXTURE_SIZE);
    for (let k = 0; k < img.length; k++) img[k] = Math.fround(normal());
    images.push(img);
  }
  return images;
}

function imagesToNhwc(images: Float32Array[]): tf.Tensor4D {
  const n = images.length;
  const flat = new Float32Array(n * FIXTURE_SIZE * FIXTURE_SIZE);
  images.forEach((img, i) => flat.set(img, i * img.length));
  return tf.tensor4d(flat, [n, FIXTURE_SIZE, FIXTURE_SIZE, 1]);
}

/**
 * Point each BN layer's moving statistics at the fixture images' actual
 * activation statistics. Calibrating one layer changes the next layer's
 * input distribution, so layers are fixed one at a time, front to back.
 */
export function calibrateMovingStats(model: tf.LayersModel, images: Float32Array[]): void {
  const batch = imagesToNhwc(images);
  const bnCount = model.layers.filter((l) => l.getClassName() === 'BatchNormalization').length;
  for (let target = 0; target < bnCount; target++) {
    const captures = traceBnInputs(model, batch);
    const cap = captures[target];
    const [, c] = cap.input.shape; // (B, C, H, W)
    const perChannel = tf.moments(cap.input, [0, 2, 3]);
    const mean = perChannel.mean.dataSync() as Float32Array;
    const variance = perChannel.variance.dataSync() as Float32Array;
    captures.forEach((x) => x.input.dispose());
    perChannel.mean.dispose();
    perChannel.variance.dispose();
    const layer = cap.layer;
    const weights = layer.getWeights();
    const names = layer.weights.map((w) => w.name);
    const replaced = weights.map((w, i) => {
      if (names[i].includes('moving_mean')) return tf.tensor1d(mean);
      if (names[i].includes('moving_variance')) return tf.tensor1d(variance);
      return w;
    });
    layer.setWeights(replaced);
    if (mean.length !== c) {
      throw new Error('channel mismatch while calibrating');
    }
  }
  batch.dispose();
}

export interface FixturePaths {
  checkpoint: string;
  imageDir: string;
  noiseDir: string;
}

export async function makeFixture(root: string): Promise<FixturePaths> {
  const checkpoint = join(root, 'checkpoint');
  const imageDir = join(root, 'images');
  const noiseDir = join(root, 'noise');
  mkdirSync(imageDir, { recursive: true });
  mkdirSync(noiseDir, { recursive: true });

  const images = fixtureImages();
  const noise = noiseImages();
  images.forEach((img, i) => {
    writeFileSync(join(imageDir, `img${String(i).padStart(3, '0')}.npy`), encodeNpy([FIXTURE_SIZE, FIXTURE_SIZE], img));
  });
  noise.forEach((img, i) => {
    writeFileSync(join(noiseDir, `img${String(i).padStart(3, '0')}.npy`), encodeNpy([FIXTURE_SIZE, FIXTURE_SIZE], img));
  });

  const model = buildFixtureModel();
  calibrateMovingStats(model, images);
  await saveModelToDir(model, checkpoint);
  return { checkpoint, imageDir, noiseDir };
}
