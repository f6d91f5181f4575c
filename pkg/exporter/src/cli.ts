/**
 * Standalone exporter CLI.
 *
 *   tsx src/cli.ts export-network --model toy:7 --out exported/
 *   tsx src/cli.ts export-activations --model toy:7 --dataset manifest.json \
 *       --layers relu0 --out acts/ [--split train]
 *
 * --model accepts `toy[:seed]`, `toy-dense[:seed]` or a path to a tfjs
 * layers-model JSON.
 */
import * as tf from '@tensorflow/tfjs'
import { readFileSync } from 'node:fs'
import { dirname, join, resolve } from 'node:path'
import { exit } from 'node:process'

import { exportActivations, exportNetwork, UnexportableError } from './export.js'
import { readTensor } from './pcxt.js'
import { buildToyConvModel, buildToyDenseModel } from './toy.js'

function parseArgs(argv: string[]): { command: string; flags: Map<string, string[]> } {
  const [command, ...rest] = argv
  const flags = new Map<string, string[]>()
  let current: string | null = null
  for (const token of rest) {
    if (token.startsWith('--')) {
      current = token.slice(2)
      if (!flags.has(current)) flags.set(current, [])
    } else if (current) {
      flags.get(current)!.push(token)
    } else {
      throw new Error(`unexpected argument ${token}`)
    }
  }
  return { command: command ?? '', flags }
}

function single(flags: Map<string, string[]>, name: string, required = true): string {
  const values = flags.get(name) ?? []
  if (values.length === 0) {
    if (required) throw new Error(`missing --${name}`)
    return ''
  }
  return values[values.length - 1]
}

async function loadModel(spec: string): Promise<{ model: tf.LayersModel; id: string }> {
  if (spec.startsWith('toy-dense')) {
    const seed = Number(spec.split(':')[1] ?? 11)
    return { model: buildToyDenseModel(seed), id: spec }
  }
  if (spec.startsWith('toy')) {
    const seed = Number(spec.split(':')[1] ?? 7)
    return { model: buildToyConvModel(seed), id: spec }
  }
  const model = await tf.loadLayersModel(`file://${resolve(spec)}`)
  return { model, id: spec }
}

function loadDataset(
  manifestPath: string,
  split: string,
): { shape: number[]; data: Float32Array }[] {
  const doc = JSON.parse(readFileSync(manifestPath, 'utf-8'))
  const root = dirname(manifestPath)
  const samples: { shape: number[]; data: Float32Array }[] = []
  for (const entry of doc.samples ?? []) {
    if (split && entry.split !== split) continue
    samples.push(readTensor(join(root, entry.path)))
  }
  return samples
}

async function main(): Promise<number> {
  const { command, flags } = parseArgs(process.argv.slice(2))
  try {
    if (command === 'export-network') {
      const { model, id } = await loadModel(single(flags, 'model'))
      const manifest = exportNetwork(model, single(flags, 'out'), id)
      console.log(JSON.stringify({ exported: single(flags, 'out'), ...manifest }))
      return 0
    }
    if (command === 'export-activations') {
      const { model } = await loadModel(single(flags, 'model'))
      const samples = loadDataset(single(flags, 'dataset'), single(flags, 'split', false))
      const layers = flags.get('layers') ?? []
      if (layers.length === 0) throw new Error('missing --layers')
      const out = single(flags, 'out')
      for (const layer of layers) {
        const result = exportActivations(model, samples, layer, join(out, layer))
        console.log(JSON.stringify(result))
      }
      return 0
    }
    console.error('usage: cli.ts export-network|export-activations [flags]')
    return 2
  } catch (err) {
    if (err instanceof UnexportableError) {
      console.error(JSON.stringify({ error: err.message, layers: err.layers }))
    } else {
      console.error(JSON.stringify({ error: String(err) }))
    }
    return 2
  }
}

main().then(exit)
