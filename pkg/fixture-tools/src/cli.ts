#!/usr/bin/env node
/**
 * fixture-tools: slice real checkpoints into desk-scale fixtures and score
 * them with an independent dense reference.
 *
 * Usage:
 *   fixture-tools export --adapter <peft_dir> [--aligned <ckpt>] [--unaligned <ckpt>]
 *                        --keys k1,k2,... [--subsample N] --out <dir>
 *   fixture-tools reference-rho --fixture <dir> [--out scores.json]
 */

import { exportFixture } from './exporter.js';
import { writeReference } from './reference.js';

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i];
    const value = argv[i + 1];
    if (!flag.startsWith('--') || value === undefined) {
      throw new Error(`malformed arguments near ${flag}`);
    }
    flags.set(flag.slice(2), value);
  }
  return flags;
}

function required(flags: Map<string, string>, name: string): string {
  const value = flags.get(name);
  if (value === undefined) throw new Error(`missing required flag --${name}`);
  return value;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    if (command === 'export') {
      const flags = parseFlags(rest);
      const manifest = exportFixture(
        {
          adapterDir: required(flags, 'adapter'),
          alignedPath: flags.get('aligned'),
          unalignedPath: flags.get('unaligned'),
          keys: required(flags, 'keys').split(',').filter(Boolean),
          subsample: flags.has('subsample') ? Number(flags.get('subsample')) : 1,
        },
        required(flags, 'out'),
      );
      console.log(`exported ${manifest.keys.length} layers to ${required(flags, 'out')}`);
      return 0;
    }
    if (command === 'reference-rho') {
      const flags = parseFlags(rest);
      const fixture = required(flags, 'fixture');
      const out = flags.get('out') ?? 'reference_rho.json';
      const layers = writeReference(fixture, out);
      console.log(`scored ${Object.keys(layers).length} layers -> ${out}`);
      return 0;
    }
    console.error('usage: fixture-tools <export|reference-rho> [flags]');
    return 2;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

if (process.argv[1] && process.argv[1].endsWith('cli.js')) {
  process.exit(main(process.argv.slice(2)));
}
