import { readFileSync } from 'fs';
import { join } from 'path';
import { describe, expect, it } from 'vitest';

import { exportFixture } from '../src/exporter.js';
import { readFixtureAdapter } from '../src/formats.js';
import { Mat } from '../src/matrix.js';
import { SafetensorsFile } from '../src/safetensors.js';
import {
  QV_KEYS,
  buildCheckpoint,
  buildPeftAdapter,
  rand,
  randMat,
  runPrimary,
  tempDir,
} from './helpers.js';

const D_OUT = 16;
const D_IN = 16;
const RANK = 2;

function buildWorld(root: string, opts: { shards?: number; identicalPair?: boolean } = {}) {
  const rng = rand(42);
  const keys = QV_KEYS(3);
  const layers = keys.map((key) => ({
    key,
    a: randMat(rng, RANK, D_IN, 0.2),
    b: randMat(rng, D_OUT, RANK, 0.2),
  }));
  buildPeftAdapter(join(root, 'adapter'), layers, {
    r: RANK,
    lora_alpha: 2 * RANK,
    target_modules: ['q_proj', 'v_proj'],
  });
  const aligned = new Map<string, Mat>();
  const unaligned = new Map<string, Mat>();
  for (const key of keys) {
    const base = randMat(rng, D_OUT, D_IN, 0.5);
    aligned.set(key, opts.identicalPair ? base : randMat(rng, D_OUT, D_IN, 0.5));
    unaligned.set(key, base);
  }
  buildCheckpoint(join(root, 'aligned'), aligned, opts.shards ?? 1);
  buildCheckpoint(join(root, 'unaligned'), unaligned, 1);
  return keys;
}

describe('fixture exporter', () => {
  it('exports a slice that the merge tool loads cleanly, shapes matching the manifest', () => {
    const root = tempDir('exp');
    const keys = buildWorld(root);
    const exported = keys.slice(0, 4);
    const out = join(root, 'fixture');
    const manifest = exportFixture(
      {
        adapterDir: join(root, 'adapter'),
        alignedPath: join(root, 'aligned'),
        unalignedPath: join(root, 'unaligned'),
        keys: exported,
        subsample: 2,
      },
      out,
    );
    expect(manifest.keys).toEqual([...exported].sort());
    for (const key of manifest.keys) {
      expect(manifest.shapes[key].a).toEqual([RANK, D_IN / 2]);
      expect(manifest.shapes[key].b).toEqual([D_OUT, RANK]);
      expect(manifest.shapes[key].weight).toEqual([D_OUT, D_IN / 2]);
    }

    const reportPath = join(root, 'analyze.json');
    runPrimary(
      'analyze',
      '--fine-tuned', join(out, 'fine_tuned'),
      '--aligned', join(out, 'aligned'),
      '--unaligned', join(out, 'unaligned'),
      '--report', reportPath,
    );
    const report = JSON.parse(readFileSync(reportPath, 'utf-8'));
    expect(report.total_count).toBe(manifest.keys.length);
    expect(report.decisions.map((d: { key: string }) => d.key).sort()).toEqual(manifest.keys);

    // shapes on disk agree with the manifest
    const adapterFile = new SafetensorsFile(join(out, 'fine_tuned', 'adapter_model.safetensors'));
    for (const key of manifest.keys) {
      expect(adapterFile.shape(`base_model.model.${key}.lora_A.weight`)).toEqual(
        manifest.shapes[key].a,
      );
      expect(adapterFile.shape(`base_model.model.${key}.lora_B.weight`)).toEqual(
        manifest.shapes[key].b,
      );
    }
  });

  it('reads index-sharded checkpoints', () => {
    const root = tempDir('exp');
    const keys = buildWorld(root, { shards: 2 });
    const out = join(root, 'fixture');
    const manifest = exportFixture(
      {
        adapterDir: join(root, 'adapter'),
        alignedPath: join(root, 'aligned'),
        unalignedPath: join(root, 'unaligned'),
        keys: keys.slice(0, 2),
      },
      out,
    );
    expect(manifest.keys.length).toBe(2);
    const adapter = readFixtureAdapter(join(out, 'fine_tuned'));
    expect([...adapter.layers.keys()].sort()).toEqual(manifest.keys);
  });

  it('identical aligned/unaligned sources produce zero-subspace tags in the merge tool', () => {
    const root = tempDir('exp');
    const keys = buildWorld(root, { identicalPair: true });
    const out = join(root, 'fixture');
    exportFixture(
      {
        adapterDir: join(root, 'adapter'),
        alignedPath: join(root, 'aligned'),
        unalignedPath: join(root, 'unaligned'),
        keys: keys.slice(0, 2),
      },
      out,
    );
    const reportPath = join(root, 'zs.json');
    runPrimary(
      'analyze',
      '--fine-tuned', join(out, 'fine_tuned'),
      '--aligned', join(out, 'aligned'),
      '--unaligned', join(out, 'unaligned'),
      '--report', reportPath,
    );
    const report = JSON.parse(readFileSync(reportPath, 'utf-8'));
    for (const decision of report.decisions) {
      expect(decision.degenerate_reason).toBe('zero-subspace');
      expect(decision.rho).toBe(0.0);
    }
  });

  it('re-exporting the same slice is byte-identical', () => {
    const root = tempDir('exp');
    const keys = buildWorld(root);
    const spec = {
      adapterDir: join(root, 'adapter'),
      alignedPath: join(root, 'aligned'),
      unalignedPath: join(root, 'unaligned'),
      keys: keys.slice(0, 3),
      subsample: 2,
    };
    exportFixture(spec, join(root, 'one'));
    exportFixture(spec, join(root, 'two'));
    for (const rel of [
      'fine_tuned/adapter_model.safetensors',
      'fine_tuned/adapter_metadata.json',
      'aligned/model.safetensors',
      'unaligned/model.safetensors',
      'manifest.json',
    ]) {
      expect(readFileSync(join(root, 'one', rel))).toEqual(readFileSync(join(root, 'two', rel)));
    }
  });

  it('aborts on missing keys, listing them', () => {
    const root = tempDir('exp');
    buildWorld(root);
    expect(() =>
      exportFixture(
        {
          adapterDir: join(root, 'adapter'),
          keys: ['model.layers.9.self_attn.q_proj', 'model.layers.0.self_attn.q_proj'],
        },
        join(root, 'nope'),
      ),
    ).toThrow(/model\.layers\.9\.self_attn\.q_proj/);
  });
});
