/**
 * Readers for ecosystem-native layouts (PEFT adapter directories, single-file
 * or index-sharded checkpoints) and for the merge tool's own fixture layout
 * (adapter_model.safetensors + adapter_metadata.json).
 */

import { existsSync, readFileSync, readdirSync } from 'fs';
import { join } from 'path';

import { Mat } from './matrix.js';
import { SafetensorsFile } from './safetensors.js';

export const PEFT_PREFIX = 'base_model.model.';
export const ADAPTER_WEIGHTS_NAME = 'adapter_model.safetensors';
export const ADAPTER_METADATA_NAME = 'adapter_metadata.json';
export const PEFT_CONFIG_NAME = 'adapter_config.json';

const LORA_PATTERN = /^(.+)\.lora_(A|B)\.weight$/;

export interface LoraLayerTensors {
  key: string;
  a: Mat; // (rank, d_in)
  b: Mat; // (d_out, rank)
  rank: number;
  loraAlpha: number;
}

export interface AdapterContents {
  layers: Map<string, LoraLayerTensors>;
  targetModules: string[];
}

interface PairedNames {
  a?: string;
  b?: string;
}

function pairLoraTensors(file: SafetensorsFile): Map<string, PairedNames> {
  const pairs = new Map<string, PairedNames>();
  for (const name of file.names()) {
    const match = LORA_PATTERN.exec(name);
    if (!match) {
      throw new Error(`${file.path}: tensor ${name} does not match the LoRA naming pattern`);
    }
    let key = match[1];
    if (key.startsWith(PEFT_PREFIX)) key = key.slice(PEFT_PREFIX.length);
    const entry = pairs.get(key) ?? {};
    if (match[2] === 'A') entry.a = name;
    else entry.b = name;
    pairs.set(key, entry);
  }
  const orphans = [...pairs.entries()].filter(([, p]) => !p.a || !p.b).map(([k]) => k);
  if (orphans.length) {
    throw new Error(`${file.path}: unpaired LoRA tensors for keys ${orphans.sort().join(', ')}`);
  }
  return pairs;
}

function collectLayers(
  file: SafetensorsFile,
  alphaFor: (key: string, rank: number) => number,
): Map<string, LoraLayerTensors> {
  const layers = new Map<string, LoraLayerTensors>();
  for (const [key, pair] of [...pairLoraTensors(file).entries()].sort()) {
    const a = file.read(pair.a!);
    const b = file.read(pair.b!);
    if (a.rows !== b.cols) {
      throw new Error(`${key}: rank mismatch between A (${a.rows}x${a.cols}) and B (${b.rows}x${b.cols})`);
    }
    layers.set(key, { key, a, b, rank: a.rows, loraAlpha: alphaFor(key, a.rows) });
  }
  return layers;
}

/** PEFT convention: adapter_model.safetensors + adapter_config.json. */
export function readPeftAdapter(dir: string): AdapterContents {
  const config = JSON.parse(readFileSync(join(dir, PEFT_CONFIG_NAME), 'utf-8')) as {
    r: number;
    lora_alpha: number;
    target_modules: string[];
  };
  const file = new SafetensorsFile(join(dir, ADAPTER_WEIGHTS_NAME));
  const layers = collectLayers(file, () => config.lora_alpha);
  return { layers, targetModules: [...config.target_modules].sort() };
}

/** The merge tool's fixture layout: per-layer rank/alpha in adapter_metadata.json. */
export function readFixtureAdapter(dir: string): AdapterContents {
  const meta = JSON.parse(readFileSync(join(dir, ADAPTER_METADATA_NAME), 'utf-8')) as {
    lora_alpha: number | null;
    target_modules: string[];
    layers: Record<string, { rank: number; lora_alpha: number }>;
  };
  const file = new SafetensorsFile(join(dir, ADAPTER_WEIGHTS_NAME));
  const layers = collectLayers(file, (key) => {
    const perLayer = meta.layers?.[key]?.lora_alpha ?? meta.lora_alpha;
    if (perLayer == null) throw new Error(`${dir}: no lora_alpha recorded for ${key}`);
    return perLayer;
  });
  return { layers, targetModules: meta.target_modules };
}

/**
 * Full-weight checkpoint addressed by canonical key (tensor name minus a
 * trailing ".weight"). Accepts a single *.safetensors file or a directory
 * holding either one, or a {"weight_map": {...}} index plus shards.
 */
export class Checkpoint {
  private readonly files = new Map<string, SafetensorsFile>();
  private readonly tensorMap = new Map<string, { file: string; tensor: string }>();

  constructor(path: string) {
    const shardNames = resolveShards(path);
    for (const [shardPath, tensorNames] of shardNames) {
      for (const tensor of tensorNames) {
        const key = tensor.endsWith('.weight') ? tensor.slice(0, -'.weight'.length) : tensor;
        if (this.tensorMap.has(key)) {
          throw new Error(`${path}: duplicate canonical key ${key}`);
        }
        this.tensorMap.set(key, { file: shardPath, tensor });
      }
    }
  }

  keys(): string[] {
    return [...this.tensorMap.keys()].sort();
  }

  has(key: string): boolean {
    return this.tensorMap.has(key);
  }

  load(key: string): Mat {
    const located = this.tensorMap.get(key);
    if (!located) throw new Error(`no weights for key ${key}`);
    let file = this.files.get(located.file);
    if (!file) {
      file = new SafetensorsFile(located.file);
      this.files.set(located.file, file);
    }
    return file.read(located.tensor);
  }
}

function resolveShards(path: string): Map<string, string[]> {
  const out = new Map<string, string[]>();
  const addFile = (p: string) => {
    out.set(p, new SafetensorsFile(p).names());
  };
  const addIndex = (indexPath: string, root: string) => {
    const index = JSON.parse(readFileSync(indexPath, 'utf-8')) as {
      weight_map: Record<string, string>;
    };
    const byShard = new Map<string, string[]>();
    for (const [tensor, shard] of Object.entries(index.weight_map)) {
      const shardPath = join(root, shard);
      if (!existsSync(shardPath)) throw new Error(`${indexPath}: shard ${shard} not found`);
      (byShard.get(shardPath) ?? byShard.set(shardPath, []).get(shardPath)!).push(tensor);
    }
    for (const [shardPath, tensors] of byShard) out.set(shardPath, tensors);
  };

  if (existsSync(path) && !readdirSafe(path)) {
    if (path.endsWith('.index.json')) addIndex(path, join(path, '..'));
    else addFile(path);
    return out;
  }
  const listing = readdirSafe(path);
  if (!listing) throw new Error(`checkpoint path does not exist: ${path}`);
  const index = listing.find((f) => f.endsWith('.safetensors.index.json'));
  if (index) {
    addIndex(join(path, index), path);
    return out;
  }
  const files = listing.filter((f) => f.endsWith('.safetensors')).sort();
  if (!files.length) throw new Error(`no safetensors content under ${path}`);
  for (const f of files) addFile(join(path, f));
  return out;
}

function readdirSafe(path: string): string[] | null {
  try {
    return readdirSync(path);
  } catch {
    return null;
  }
}
