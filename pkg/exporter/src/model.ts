/**
 * Checkpoint loading and BN-layer discovery for TensorFlow.js layers models.
 *
 * Checkpoints live in a directory holding model.json (topology + weights
 * manifest) and weights.bin. BN layers are discovered by instrumenting an
 * actual forward pass on a dummy input, so the export order is the
 * execution order, not the declaration or name order.
 */

import { readFileSync, writeFileSync, mkdirSync } from 'node:fs';
import { join } from 'node:path';

import * as tf from '@tensorflow/tfjs';

export interface BnCapture {
  layer: tf.layers.Layer;
  /** pre-normalization input, converted to (batch, channels, height, width) */
  input: tf.Tensor4D;
}

export async function loadModelFromDir(dir: string): Promise<tf.LayersModel> {
  const modelJson = JSON.parse(readFileSync(join(dir, 'model.json'), 'utf8'));
  const weightData = readFileSync(join(dir, 'weights.bin'));
  const artifacts: tf.io.ModelArtifacts = {
    modelTopology: modelJson.modelTopology,
    weightSpecs: modelJson.weightsManifest[0].weights,
    weightData: weightData.buffer.slice(weightData.byteOffset, weightData.byteOffset + weightData.byteLength),
  };
  return tf.loadLayersModel(tf.io.fromMemory(artifacts));
}

export async function saveModelToDir(model: tf.LayersModel, dir: string): Promise<void> {
  mkdirSync(dir, { recursive: true });
  await model.save(
    tf.io.withSaveHandler(async (artifacts) => {
      const manifest = {
        modelTopology: artifacts.modelTopology,
        weightsManifest: [{ paths: ['weights.bin'], weights: artifacts.weightSpecs }],
      };
      writeFileSync(join(dir, 'model.json'), JSON.stringify(manifest));
      writeFileSync(join(dir, 'weights.bin'), Buffer.from(artifacts.weightData as ArrayBuffer));
      return { modelArtifactsInfo: { dateSaved: new Date(), modelTopologyType: 'JSON' } };
    }),
  );
}

function isBatchNorm(layer: tf.layers.Layer): boolean {
  return layer.getClassName() === 'BatchNormalization';
}

/** channels-last (NHWC / NC) tensor to the container's (B, C, H, W) layout */
export function toChannelsFirst(t: tf.Tensor): tf.Tensor4D {
  if (t.rank === 4) {
    return tf.transpose(t as tf.Tensor4D, [0, 3, 1, 2]);
  }
  if (t.rank === 2) {
    const [b, c] = t.shape;
    return tf.reshape(t, [b, c, 1, 1]) as tf.Tensor4D;
  }
  throw new Error(`BN input of rank ${t.rank} is not supported`);
}

/**
 * Run one forward pass and capture every BN layer's input, in firing order.
 * The patched call methods are always restored.
 */
export function traceBnInputs(model: tf.LayersModel, input: tf.Tensor): BnCapture[] {
  const captures: BnCapture[] = [];
  const patched: Array<{ layer: tf.layers.Layer; original: Function }> = [];
  for (const layer of model.layers) {
    if (!isBatchNorm(layer)) continue;
    const original = layer.call.bind(layer);
    patched.push({ layer, original });
    (layer as unknown as { call: Function }).call = (
      inputs: tf.Tensor | tf.Tensor[],
      kwargs: Record<string, unknown>,
    ) => {
      const first = Array.isArray(inputs) ? inputs[0] : inputs;
      captures.push({ layer, input: tf.keep(toChannelsFirst(first)) });
      return original(inputs, kwargs);
    };
  }
  try {
    const out = model.predict(input);
    (Array.isArray(out) ? out : [out]).forEach((t) => t.dispose());
  } finally {
    for (const { layer, original } of patched) {
      (layer as unknown as { call: Function }).call = original;
    }
  }
  return captures;
}

/** BN layers in execution order, discovered with a zero-valued dummy input. */
export function bnLayersInExecutionOrder(model: tf.LayersModel): tf.layers.Layer[] {
  const shape = model.inputs[0].shape.map((d) => (d === null || d === -1 ? 1 : d));
  const dummy = tf.zeros(shape as number[]);
  const captures = traceBnInputs(model, dummy);
  dummy.dispose();
  captures.forEach((c) => c.input.dispose());
  return captures.map((c) => c.layer);
}

export interface BnParams {
  name: string;
  channels: number;
  gamma: Float32Array;
  beta: Float32Array;
  movingMean: Float32Array;
  movingVariance: Float32Array;
  epsilon: number;
  /** EMA retain factor: moving = momentum * moving + (1 - momentum) * batch */
  momentum: number;
}

export function bnParams(layer: tf.layers.Layer): BnParams {
  const byName = new Map<string, Float32Array>();
  for (const w of layer.weights) {
    const data = w.read().dataSync() as Float32Array;
    if (w.name.includes('gamma')) byName.set('gamma', data);
    else if (w.name.includes('beta')) byName.set('beta', data);
    else if (w.name.includes('moving_mean')) byName.set('moving_mean', data);
    else if (w.name.includes('moving_variance')) byName.set('moving_variance', data);
  }
  const config = layer.getConfig() as { epsilon?: number; momentum?: number };
  const mean = byName.get('moving_mean');
  const variance = byName.get('moving_variance');
  if (!mean || !variance) {
    throw new Error(`BN layer ${layer.name} has no moving statistics`);
  }
  const channels = mean.length;
  return {
    name: layer.name,
    channels,
    gamma: byName.get('gamma') ?? new Float32Array(channels).fill(1),
    beta: byName.get('beta') ?? new Float32Array(channels),
    movingMean: mean,
    movingVariance: variance,
    epsilon: config.epsilon ?? 1e-3,
    momentum: config.momentum ?? 0.99,
  };
}
