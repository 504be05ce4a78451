import { execFileSync } from 'child_process';
import { mkdtempSync, mkdirSync, writeFileSync } from 'fs';
import { tmpdir } from 'os';
import { join } from 'path';

import { PEFT_PREFIX } from '../src/formats.js';
import { Mat, mat } from '../src/matrix.js';
import { writeSafetensors } from '../src/safetensors.js';

/** Run the merge tool's CLI; throws on non-zero exit. */
export function runPrimary(...args: string[]): string {
  return execFileSync('python3', ['-m', 'safemerge.cli', ...args], { encoding: 'utf-8' });
}

export function tempDir(prefix: string): string {
  return mkdtempSync(join(tmpdir(), `${prefix}-`));
}

/** mulberry32: tiny deterministic PRNG for test data. */
export function rand(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function randMat(rng: () => number, rows: number, cols: number, scale = 1.0): Mat {
  const out = mat(rows, cols);
  for (let i = 0; i < out.data.length; i++) {
    out.data[i] = Math.fround((rng() * 2 - 1) * scale);
  }
  return out;
}

export interface SyntheticLayer {
  key: string;
  a: Mat;
  b: Mat;
}

/** Write a PEFT-convention adapter directory (the ecosystem-native layout). */
export function buildPeftAdapter(
  dir: string,
  layers: SyntheticLayer[],
  config: { r: number; lora_alpha: number; target_modules: string[] },
): void {
  mkdirSync(dir, { recursive: true });
  const tensors = new Map<string, Mat>();
  for (const layer of layers) {
    tensors.set(`${PEFT_PREFIX}${layer.key}.lora_A.weight`, layer.a);
    tensors.set(`${PEFT_PREFIX}${layer.key}.lora_B.weight`, layer.b);
  }
  writeSafetensors(join(dir, 'adapter_model.safetensors'), tensors);
  writeFileSync(
    join(dir, 'adapter_config.json'),
    JSON.stringify({ peft_type: 'LORA', ...config }, null, 2) + '\n',
  );
}

/** Write a checkpoint directory, single-file or sharded with an index. */
export function buildCheckpoint(
  dir: string,
  weights: Map<string, Mat>, // canonical key -> matrix
  shards = 1,
): void {
  mkdirSync(dir, { recursive: true });
  const named = new Map<string, Mat>();
  for (const [key, m] of weights) named.set(`${key}.weight`, m);
  if (shards === 1) {
    writeSafetensors(join(dir, 'model.safetensors'), named);
    return;
  }
  const names = [...named.keys()].sort();
  const weightMap: Record<string, string> = {};
  const perShard: Map<string, Mat>[] = Array.from({ length: shards }, () => new Map());
  names.forEach((name, i) => {
    const shardName = `model-${String((i % shards) + 1).padStart(5, '0')}-of-${String(shards).padStart(5, '0')}.safetensors`;
    perShard[i % shards].set(name, named.get(name)!);
    weightMap[name] = shardName;
  });
  perShard.forEach((tensors, i) => {
    if (tensors.size) {
      const shardName = `model-${String(i + 1).padStart(5, '0')}-of-${String(shards).padStart(5, '0')}.safetensors`;
      writeSafetensors(join(dir, shardName), tensors);
    }
  });
  writeFileSync(
    join(dir, 'model.safetensors.index.json'),
    JSON.stringify({ weight_map: weightMap }, null, 2) + '\n',
  );
}

export const QV_KEYS = (layers: number): string[] =>
  Array.from({ length: layers }, (_, i) => i).flatMap((i) => [
    `model.layers.${i}.self_attn.q_proj`,
    `model.layers.${i}.self_attn.v_proj`,
  ]);
