/**
 * Walk a checkpoint and write MDET "model" and "trace" records that the
 * drift library consumes directly.
 */

import { readdirSync, readFileSync } from 'node:fs';
import { basename, join } from 'node:path';

import * as tf from '@tensorflow/tfjs';

import { F } from './canonicalJson.js';
import { MdetRecord, MdetTensor, writeMdet } from './mdet.js';
import {
  bnLayersInExecutionOrder,
  bnParams,
  loadModelFromDir,
  traceBnInputs,
} from './model.js';
import { parseNpy } from './npy.js';

export interface ExportManifest {
  checkpoint: string;
  architecture: string;
  bnLayers: Array<{ name: string; channels: number }>;
  outputPath: string;
  batchSize: number;
  sampleCount: number;
}

const CREATOR = 'mde-export';

function bnTensors(model: tf.LayersModel): { tensors: MdetTensor[]; layers: Array<{ name: string; channels: number }>; epsilon: number; momentum: number } {
  const order = bnLayersInExecutionOrder(model);
  if (order.length === 0) {
    throw new Error('checkpoint has no BN layers; nothing to export');
  }
  const skipped = new Map<string, number>();
  for (const layer of model.layers) {
    const kind = layer.getClassName();
    if (kind !== 'BatchNormalization') {
      skipped.set(kind, (skipped.get(kind) ?? 0) + 1);
    }
  }
  for (const [kind, count] of [...skipped.entries()].sort()) {
    console.error(`warning: skipping ${count} ${kind} layer(s); only BN statistics are exported`);
  }
  const tensors: MdetTensor[] = [];
  const layers: Array<{ name: string; channels: number }> = [];
  let epsilon = 1e-3;
  let momentum = 0.99;
  order.forEach((layer, j) => {
    const p = bnParams(layer);
    epsilon = p.epsilon;
    momentum = p.momentum;
    layers.push({ name: p.name, channels: p.channels });
    const c = [p.channels];
    tensors.push({ name: `bn${j}/gamma`, role: 'bn_gamma', layerIndex: j, dtype: 'f32', shape: c, data: p.gamma });
    tensors.push({ name: `bn${j}/beta`, role: 'bn_beta', layerIndex: j, dtype: 'f32', shape: c, data: p.beta });
    tensors.push({
      name: `bn${j}/running_mean`,
      role: 'bn_running_mean',
      layerIndex: j,
      dtype: 'f32',
      shape: c,
      data: p.movingMean,
    });
    tensors.push({
      name: `bn${j}/running_var`,
      role: 'bn_running_var',
      layerIndex: j,
      dtype: 'f32',
      shape: c,
      data: p.movingVariance,
    });
  });
  return { tensors, layers, epsilon, momentum };
}

export async function exportModel(
  checkpointDir: string,
  outPath: string,
  modelId?: string,
): Promise<ExportManifest> {
  const model = await loadModelFromDir(checkpointDir);
  const { tensors, layers, epsilon, momentum } = bnTensors(model);
  const record: MdetRecord = {
    kind: 'model',
    tensors,
    metadata: {
      creator: CREATOR,
      dataset_id: '',
      eps: new F(epsilon),
      model_id: modelId ?? basename(checkpointDir),
      retain_alpha: new F(momentum),
      seed: 0,
    },
  };
  writeMdet(record, outPath);
  return {
    checkpoint: checkpointDir,
    architecture: model.name,
    bnLayers: layers,
    outputPath: outPath,
    batchSize: 0,
    sampleCount: 0,
  };
}

/** nearest-neighbor resize of a (C, H, W) image to the target spatial size */
function resizeNearest(data: Float64Array, shape: number[], th: number, tw: number): Float64Array {
  const [c, h, w] = shape;
  if (h === th && w === tw) return data;
  const out = new Float64Array(c * th * tw);
  for (let ci = 0; ci < c; ci++) {
    for (let y = 0; y < th; y++) {
      const sy = Math.min(h - 1, Math.round((y * h) / th));
      for (let x = 0; x < tw; x++) {
        const sx = Math.min(w - 1, Math.round((x * w) / tw));
        out[(ci * th + y) * tw + x] = data[(ci * h + sy) * w + sx];
      }
    }
  }
  return out;
}

function loadImageFolder(folder: string, channels: number, height: number, width: number): Float64Array[] {
  const names = readdirSync(folder)
    .filter((n) => n.endsWith('.npy'))
    .sort();
  if (names.length === 0) {
    throw new Error(`no .npy images in ${folder}`);
  }
  return names.map((name) => {
    const arr = parseNpy(readFileSync(join(folder, name)));
    let shape = arr.shape;
    let data = arr.data;
    if (shape.length === 2) {
      shape = [1, shape[0], shape[1]];
    }
    if (shape.length !== 3) {
      throw new Error(`${name}: expected a (H, W) or (C, H, W) image, got shape ${JSON.stringify(arr.shape)}`);
    }
    if (shape[0] !== channels) {
      throw new Error(`${name}: image has ${shape[0]} channels, model expects ${channels}`);
    }
    data = resizeNearest(data, shape, height, width);
    return data;
  });
}

export async function exportTrace(
  checkpointDir: string,
  imageFolder: string,
  batchSize: number,
  batches: number,
  outPath: string,
  datasetId?: string,
  modelId?: string,
): Promise<ExportManifest> {
  if (batchSize < 1 || batches < 1) {
    throw new Error('batchSize and batches must be positive');
  }
  const model = await loadModelFromDir(checkpointDir);
  const inputShape = model.inputs[0].shape; // [null, H, W, C]
  const [, height, width, channels] = inputShape.map((d) => (d === null || d === -1 ? 1 : d)) as number[];
  const images = loadImageFolder(imageFolder, channels, height, width);
  if (images.length < batchSize * batches) {
    throw new Error(`folder has ${images.length} images; need ${batchSize * batches}`);
  }
  const order = bnLayersInExecutionOrder(model);
  if (order.length === 0) {
    throw new Error('checkpoint has no BN layers; nothing to trace');
  }
  const tensors: MdetTensor[] = [];
  const layers = order.map((layer) => ({ name: layer.name, channels: bnParams(layer).channels }));
  for (let b = 0; b < batches; b++) {
    const chw = images.slice(b * batchSize, (b + 1) * batchSize);
    const nhwc = new Float32Array(batchSize * height * width * channels);
    chw.forEach((img, n) => {
      for (let ci = 0; ci < channels; ci++) {
        for (let y = 0; y < height; y++) {
          for (let x = 0; x < width; x++) {
            nhwc[((n * height + y) * width + x) * channels + ci] = img[(ci * height + y) * width + x];
          }
        }
      }
    });
    const input = tf.tensor4d(nhwc, [batchSize, height, width, channels]);
    const captures = traceBnInputs(model, input);
    input.dispose();
    captures.forEach((cap, l) => {
      const shape = cap.input.shape as number[];
      tensors.push({
        name: `batch${String(b).padStart(3, '0')}/bn${l}`,
        role: 'activation',
        layerIndex: l,
        dtype: 'f32',
        shape,
        data: cap.input.dataSync() as Float32Array,
      });
      cap.input.dispose();
    });
  }
  const record: MdetRecord = {
    kind: 'trace',
    tensors,
    metadata: {
      creator: CREATOR,
      dataset_id: datasetId ?? basename(imageFolder),
      model_id: modelId ?? basename(checkpointDir),
      seed: 0,
    },
  };
  writeMdet(record, outPath);
  return {
    checkpoint: checkpointDir,
    architecture: model.name,
    bnLayers: layers,
    outputPath: outPath,
    batchSize,
    sampleCount: batchSize * batches,
  };
}
