/** Regenerate the deterministic fixture checkpoint and image folders. */

import { fileURLToPath } from 'node:url';
import { dirname, join } from 'node:path';

import { makeFixture } from './fixture.js';

const root = join(dirname(fileURLToPath(import.meta.url)), '..', 'fixtures');
const paths = await makeFixture(root);
console.error(`fixture checkpoint: ${paths.checkpoint}`);
console.error(`fixture images:     ${paths.imageDir}`);
console.error(`noise images:       ${paths.noiseDir}`);
