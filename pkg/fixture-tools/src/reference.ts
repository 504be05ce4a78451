/**
 * Independent dense reference for the per-layer projection cosine.
 *
 * Materializes the full projector C = V V^T / ||V||_F (which the merge tool
 * computes only in factored form), applies it to the dense update, and takes
 * the cosine under the Frobenius inner product. The degenerate conventions
 * mirror the main tool: zero update -> 1, zero alignment difference -> 0,
 * update orthogonal to the subspace -> 0.
 */

import { writeFileSync } from 'fs';
import { join } from 'path';

import { Checkpoint, readFixtureAdapter } from './formats.js';
import { Mat, frobInner, frobNorm, matmul, scaled, sub, transpose } from './matrix.js';

export interface LayerReference {
  rho: number;
  degenerate_reason: string | null;
}

export function denseRho(v: Mat, delta: Mat): LayerReference {
  const deltaNorm = frobNorm(delta);
  if (deltaNorm === 0) return { rho: 1.0, degenerate_reason: 'zero-delta' };
  const vNorm = frobNorm(v);
  if (vNorm === 0) return { rho: 0.0, degenerate_reason: 'zero-subspace' };
  const projector = scaled(matmul(v, transpose(v)), 1 / vNorm); // the full d_out x d_out C
  const projected = matmul(projector, delta);
  const num = frobInner(delta, projected);
  const projectedNorm = frobNorm(projected);
  if (num <= 0 || projectedNorm === 0) {
    return { rho: 0.0, degenerate_reason: 'orthogonal-delta' };
  }
  return { rho: Math.min(Math.max(num / (deltaNorm * projectedNorm), 0), 1), degenerate_reason: null };
}

/** Score every layer of a fixture directory (fine_tuned + aligned + unaligned). */
export function referenceRho(fixtureDir: string): Record<string, LayerReference> {
  const adapter = readFixtureAdapter(join(fixtureDir, 'fine_tuned'));
  const aligned = new Checkpoint(join(fixtureDir, 'aligned'));
  const unaligned = new Checkpoint(join(fixtureDir, 'unaligned'));
  const out: Record<string, LayerReference> = {};
  for (const [key, layer] of adapter.layers) {
    const v = sub(aligned.load(key), unaligned.load(key));
    const delta = scaled(matmul(layer.b, layer.a), layer.loraAlpha / layer.rank);
    out[key] = denseRho(v, delta);
  }
  return out;
}

export function writeReference(fixtureDir: string, outPath: string): Record<string, LayerReference> {
  const layers = referenceRho(fixtureDir);
  const ordered: Record<string, LayerReference> = {};
  for (const key of Object.keys(layers).sort()) ordered[key] = layers[key];
  const doc = { tool: { name: 'fixture-tools', version: '0.1.0' }, layers: ordered };
  writeFileSync(outPath, JSON.stringify(doc, null, 2) + '\n');
  return layers;
}
