#!/usr/bin/env node
/**
 * mde-export: write MDET records from a TensorFlow.js checkpoint.
 *
 * Usage:
 *   mde-export model --checkpoint <dir> -o <file.mdet> [--model-id <id>]
 *   mde-export trace --checkpoint <dir> --images <dir> -o <file.mdet>
 *                    [--batch <n>] [--batches <n>] [--dataset-id <id>] [--model-id <id>]
 *
 * The checkpoint directory holds model.json and weights.bin (layers-model
 * format). Image folders hold .npy arrays, (H, W) or (C, H, W), iterated in
 * lexicographic order and nearest-resized to the model's input size. The
 * manifest is printed as JSON on stdout; warnings go to stderr.
 */

import { exportModel, exportTrace } from './export.js';

interface Args {
  command?: string;
  checkpoint?: string;
  images?: string;
  output?: string;
  batch: number;
  batches: number;
  modelId?: string;
  datasetId?: string;
}

function usage(message?: string): never {
  if (message) console.error(`error: ${message}`);
  console.error('usage: mde-export model --checkpoint <dir> -o <file.mdet> [--model-id <id>]');
  console.error('       mde-export trace --checkpoint <dir> --images <dir> -o <file.mdet>');
  console.error('                        [--batch <n>] [--batches <n>] [--dataset-id <id>] [--model-id <id>]');
  process.exit(2);
}

function parseArgs(argv: string[]): Args {
  const args: Args = { batch: 16, batches: 1 };
  args.command = argv[0];
  for (let i = 1; i < argv.length; i++) {
    switch (argv[i]) {
      case '--checkpoint':
        args.checkpoint = argv[++i];
        break;
      case '--images':
        args.images = argv[++i];
        break;
      case '-o':
      case '--output':
        args.output = argv[++i];
        break;
      case '--batch':
        args.batch = parseInt(argv[++i], 10);
        break;
      case '--batches':
        args.batches = parseInt(argv[++i], 10);
        break;
      case '--model-id':
        args.modelId = argv[++i];
        break;
      case '--dataset-id':
        args.datasetId = argv[++i];
        break;
      default:
        usage(`unknown flag ${argv[i]}`);
    }
  }
  return args;
}

const args = parseArgs(process.argv.slice(2));
if (args.command !== 'model' && args.command !== 'trace') {
  usage(`unknown command ${args.command ?? '(none)'}`);
}
if (!args.checkpoint || !args.output) {
  usage('--checkpoint and -o are required');
}

try {
  const manifest =
    args.command === 'model'
      ? await exportModel(args.checkpoint, args.output, args.modelId)
      : await exportTrace(
          args.checkpoint,
          args.images ?? usage('--images is required for trace'),
          args.batch,
          args.batches,
          args.output,
          args.datasetId,
          args.modelId,
        );
  console.log(JSON.stringify(manifest, null, 2));
} catch (err) {
  console.error(`error: ${err instanceof Error ? err.message : err}`);
  process.exit(1);
}
