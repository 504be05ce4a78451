/**
 * Slice a real LoRA adapter and an aligned/unaligned checkpoint pair down to
 * a desk-scale fixture in exactly the layout the merge tool consumes.
 *
 * Slicing keeps a subset of layer keys and optionally subsamples input
 * columns: A loses the same columns as the weight matrices, B is untouched,
 * so factored shapes stay mutually consistent.
 */

import { mkdirSync, writeFileSync } from 'fs';
import { join } from 'path';

import {
  ADAPTER_METADATA_NAME,
  ADAPTER_WEIGHTS_NAME,
  AdapterContents,
  Checkpoint,
  PEFT_PREFIX,
  readPeftAdapter,
} from './formats.js';
import { Mat, subsampleColumns } from './matrix.js';
import { writeSafetensors } from './safetensors.js';

export interface SliceSpec {
  adapterDir: string;
  alignedPath?: string;
  unalignedPath?: string;
  keys: string[];
  subsample?: number; // keep every n-th input column (default 1: keep all)
}

export interface ExportManifest {
  source: { adapter: string; aligned: string | null; unaligned: string | null };
  subsample: number;
  keys: string[];
  shapes: Record<string, { a: number[]; b: number[]; weight: number[] | null }>;
}

export const MANIFEST_NAME = 'manifest.json';

function checkKeys(requested: string[], available: (key: string) => boolean, label: string): void {
  const missing = requested.filter((k) => !available(k)).sort();
  if (missing.length) {
    throw new Error(`${label} is missing requested keys: ${missing.join(', ')}`);
  }
}

export function exportFixture(spec: SliceSpec, outDir: string): ExportManifest {
  const step = spec.subsample ?? 1;
  const adapter = readPeftAdapter(spec.adapterDir);
  checkKeys(spec.keys, (k) => adapter.layers.has(k), spec.adapterDir);
  const aligned = spec.alignedPath ? new Checkpoint(spec.alignedPath) : null;
  const unaligned = spec.unalignedPath ? new Checkpoint(spec.unalignedPath) : null;
  if (aligned) checkKeys(spec.keys, (k) => aligned.has(k), spec.alignedPath!);
  if (unaligned) checkKeys(spec.keys, (k) => unaligned.has(k), spec.unalignedPath!);

  const keys = [...spec.keys].sort();
  const manifest: ExportManifest = {
    source: {
      adapter: spec.adapterDir,
      aligned: spec.alignedPath ?? null,
      unaligned: spec.unalignedPath ?? null,
    },
    subsample: step,
    keys,
    shapes: {},
  };

  mkdirSync(outDir, { recursive: true });
  writeAdapterSlice(adapter, keys, step, join(outDir, 'fine_tuned'), manifest);
  if (aligned) writeWeightSlice(aligned, keys, step, join(outDir, 'aligned'), manifest);
  if (unaligned) writeWeightSlice(unaligned, keys, step, join(outDir, 'unaligned'), manifest);
  writeFileSync(join(outDir, MANIFEST_NAME), JSON.stringify(manifest, null, 2) + '\n');
  return manifest;
}

function writeAdapterSlice(
  adapter: AdapterContents,
  keys: string[],
  step: number,
  outDir: string,
  manifest: ExportManifest,
): void {
  const tensors = new Map<string, Mat>();
  const layerMeta: Record<string, { rank: number; lora_alpha: number }> = {};
  const ranks = new Set<number>();
  const alphas = new Set<number>();
  for (const key of keys) {
    const layer = adapter.layers.get(key)!;
    const a = subsampleColumns(layer.a, step);
    tensors.set(`${PEFT_PREFIX}${key}.lora_A.weight`, a);
    tensors.set(`${PEFT_PREFIX}${key}.lora_B.weight`, layer.b);
    layerMeta[key] = { rank: layer.rank, lora_alpha: layer.loraAlpha };
    ranks.add(layer.rank);
    alphas.add(layer.loraAlpha);
    manifest.shapes[key] = {
      a: [a.rows, a.cols],
      b: [layer.b.rows, layer.b.cols],
      weight: manifest.shapes[key]?.weight ?? null,
    };
  }
  const modules = [...new Set(keys.map((k) => k.split('.').at(-1)!))].sort();
  const metadata = {
    format_version: 1,
    rank: ranks.size === 1 ? [...ranks][0] : null,
    lora_alpha: alphas.size === 1 ? [...alphas][0] : null,
    target_modules: modules,
    heterogeneous_rank: ranks.size > 1,
    layers: layerMeta,
  };
  mkdirSync(outDir, { recursive: true });
  writeSafetensors(join(outDir, ADAPTER_WEIGHTS_NAME), tensors);
  writeFileSync(join(outDir, ADAPTER_METADATA_NAME), JSON.stringify(metadata, null, 2) + '\n');
}

function writeWeightSlice(
  source: Checkpoint,
  keys: string[],
  step: number,
  outDir: string,
  manifest: ExportManifest,
): void {
  const tensors = new Map<string, Mat>();
  for (const key of keys) {
    const sliced = subsampleColumns(source.load(key), step);
    tensors.set(`${key}.weight`, sliced);
    manifest.shapes[key].weight = [sliced.rows, sliced.cols];
  }
  writeSafetensors(join(outDir, 'model.safetensors'), tensors);
}
