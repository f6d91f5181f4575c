/**
 * Export tfjs layer models into the pcx network-spec + PCXT weight format.
 *
 * The engine is channels-first with (out, in, kh, kw) conv kernels and
 * row-major (C, H, W) flattening; tfjs is channels-last with
 * [kh, kw, in, out] kernels and [H, W, C] flattening. Kernels are
 * transposed and the first dense layer after a flatten gets its columns
 * permuted accordingly. Batch normalization is folded into the preceding
 * conv layer (mandatory: the engine has no batch-norm layer kind).
 *
 * Nothing is written until the whole model has been converted successfully.
 */
import * as tf from '@tensorflow/tfjs'
import { mkdirSync, writeFileSync, renameSync } from 'node:fs'
import { join, dirname, basename } from 'node:path'

import { encodeTensor, sha256, writeTensor } from './pcxt.js'

export class UnexportableError extends Error {
  constructor(message: string, public readonly layers: string[]) {
    super(message)
  }
}

interface ArtifactLayer {
  kind: string
  weights?: { shape: number[]; data: Float32Array }
  bias?: { shape: number[]; data: Float32Array }
  kernel?: number
  stride?: number
  padding?: number
  source: string
}

export interface ExportManifest {
  source_model: string
  layer_mapping: Record<string, string>
  folding_report: string[]
  checksums: Record<string, string>
  max_cast_error: number
}

interface PendingConv {
  kernel: number[][][][] // [kh][kw][in][out]
  bias: number[]
  stride: number
  padding: number
  activation: string
  source: string
  outChannels: number
}

export function stableStringify(value: unknown): string {
  if (Array.isArray(value)) {
    return '[' + value.map(stableStringify).join(',') + ']'
  }
  if (value !== null && typeof value === 'object') {
    const entries = Object.entries(value as Record<string, unknown>)
      .sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0))
      .map(([k, v]) => JSON.stringify(k) + ':' + stableStringify(v))
    return '{' + entries.join(',') + '}'
  }
  return JSON.stringify(value)
}

function atomicWrite(path: string, text: string): void {
  mkdirSync(dirname(path), { recursive: true })
  const tmp = join(dirname(path), `.${basename(path)}.tmp`)
  writeFileSync(tmp, text)
  renameSync(tmp, path)
}

function convPadding(config: any, source: string, problems: string[]): number {
  const k = Array.isArray(config.kernelSize) ? config.kernelSize[0] : config.kernelSize
  const s = Array.isArray(config.strides) ? config.strides[0] : config.strides
  if (config.padding === 'valid') return 0
  if (config.padding === 'same') {
    if (s === 1 && k % 2 === 1) return (k - 1) / 2
    problems.push(`${source} (same-padding needs stride 1 and odd kernel)`)
    return 0
  }
  problems.push(`${source} (padding mode ${config.padding})`)
  return 0
}

/** Fold batch-norm parameters into the held conv kernel/bias. */
function foldBatchNorm(conv: PendingConv, bn: tf.layers.Layer): void {
  const weights = bn.getWeights().map((w) => w.dataSync())
  const config = bn.getConfig() as any
  const n = conv.outChannels
  // order per tfjs: gamma, beta, movingMean, movingVariance (gamma/beta
  // omitted when scale/center are false)
  let idx = 0
  const gamma = config.scale === false ? new Float32Array(n).fill(1) : (weights[idx++] as Float32Array)
  const beta = config.center === false ? new Float32Array(n) : (weights[idx++] as Float32Array)
  const mean = weights[idx++] as Float32Array
  const variance = weights[idx++] as Float32Array
  const eps = config.epsilon ?? 1e-3
  for (let o = 0; o < n; o++) {
    const scale = gamma[o] / Math.sqrt(variance[o] + eps)
    for (const row of conv.kernel) {
      for (const col of row) {
        for (const inCh of col) {
          inCh[o] *= scale
        }
      }
    }
    conv.bias[o] = (conv.bias[o] - mean[o]) * scale + beta[o]
  }
}

function flushConv(conv: PendingConv, layers: ArtifactLayer[]): void {
  const [kh, kw, inC, outC] = [
    conv.kernel.length,
    conv.kernel[0].length,
    conv.kernel[0][0].length,
    conv.outChannels,
  ]
  const data = new Float32Array(outC * inC * kh * kw)
  for (let o = 0; o < outC; o++) {
    for (let i = 0; i < inC; i++) {
      for (let a = 0; a < kh; a++) {
        for (let b = 0; b < kw; b++) {
          data[((o * inC + i) * kh + a) * kw + b] = conv.kernel[a][b][i][o]
        }
      }
    }
  }
  layers.push({
    kind: 'conv2d',
    weights: { shape: [outC, inC, kh, kw], data },
    bias: { shape: [outC], data: Float32Array.from(conv.bias) },
    kernel: kh,
    stride: conv.stride,
    padding: conv.padding,
    source: conv.source,
  })
  if (conv.activation === 'relu') {
    layers.push({ kind: 'relu', source: conv.source })
  }
}

export function convertModel(model: tf.LayersModel, sourceId: string): {
  layers: ArtifactLayer[]
  inputShape: number[]
  classCount: number
  foldingReport: string[]
} {
  const problems: string[] = []
  const folding: string[] = []
  const layers: ArtifactLayer[] = []
  let pending: PendingConv | null = null

  const batchInput = (model.layers[0].batchInputShape ?? []).slice(1) as number[]
  let inputShape: number[]
  if (batchInput.length === 3) {
    inputShape = [batchInput[2], batchInput[0], batchInput[1]] // HWC -> CHW
  } else if (batchInput.length === 1) {
    inputShape = [batchInput[0]]
  } else {
    throw new UnexportableError(
      `unsupported input rank ${batchInput.length}`,
      [model.layers[0].name],
    )
  }
  // engine-side activation shape, tracked for flatten permutations
  let shape = inputShape.slice()
  let flattenFrom: number[] | null = null

  const flush = () => {
    if (pending) {
      flushConv(pending, layers)
      const k = pending.kernel.length
      shape = [
        pending.outChannels,
        Math.floor((shape[1] + 2 * pending.padding - k) / pending.stride) + 1,
        Math.floor((shape[2] + 2 * pending.padding - k) / pending.stride) + 1,
      ]
      pending = null
    }
  }

  for (const layer of model.layers) {
    const cls = layer.getClassName()
    const config = layer.getConfig() as any
    if (cls === 'InputLayer') continue
    if (cls === 'BatchNormalization') {
      if (!pending) {
        problems.push(`${layer.name} (batch-norm without preceding conv)`)
        continue
      }
      foldBatchNorm(pending, layer)
      folding.push(`${layer.name} -> ${pending.source}`)
      continue
    }
    if (cls === 'Conv2D') {
      flush()
      const [kernelT, biasT] = layer.getWeights()
      const kernel = kernelT.arraySync() as number[][][][]
      const outChannels = config.filters as number
      const bias = biasT
        ? Array.from(biasT.dataSync())
        : new Array(outChannels).fill(0)
      const stride = Array.isArray(config.strides) ? config.strides[0] : config.strides
      const activation = config.activation ?? 'linear'
      pending = {
        kernel,
        bias,
        stride,
        padding: convPadding(config, layer.name, problems),
        activation,
        source: layer.name,
        outChannels,
      }
      if (activation !== 'linear' && activation !== 'relu') {
        problems.push(`${layer.name} (activation ${activation})`)
      }
      continue
    }
    flush()
    if (cls === 'ReLU' || (cls === 'Activation' && config.activation === 'relu')) {
      layers.push({ kind: 'relu', source: layer.name })
    } else if (cls === 'Activation' && config.activation === 'linear') {
      continue
    } else if (cls === 'MaxPooling2D' || cls === 'AveragePooling2D') {
      if (config.padding !== 'valid') {
        problems.push(`${layer.name} (pool padding ${config.padding})`)
        continue
      }
      const k = Array.isArray(config.poolSize) ? config.poolSize[0] : config.poolSize
      const s = config.strides
        ? Array.isArray(config.strides) ? config.strides[0] : config.strides
        : k
      layers.push({
        kind: cls === 'MaxPooling2D' ? 'maxpool2d' : 'avgpool2d',
        kernel: k,
        stride: s,
        padding: 0,
        source: layer.name,
      })
      shape = [
        shape[0],
        Math.floor((shape[1] - k) / s) + 1,
        Math.floor((shape[2] - k) / s) + 1,
      ]
    } else if (cls === 'Flatten') {
      flattenFrom = shape.length === 3 ? shape.slice() : null
      layers.push({ kind: 'flatten', source: layer.name })
      shape = [shape.reduce((a, b) => a * b, 1)]
    } else if (cls === 'Dense') {
      const [kernelT, biasT] = layer.getWeights()
      const kernel = kernelT.arraySync() as number[][] // [in][out]
      const inDim = kernel.length
      const outDim = kernel[0].length
      const data = new Float32Array(outDim * inDim)
      for (let o = 0; o < outDim; o++) {
        for (let i = 0; i < inDim; i++) {
          // i indexes the engine's (C,H,W) flat order; map it back to the
          // tfjs (H,W,C) flat order when this dense directly follows flatten
          let src = i
          if (flattenFrom) {
            const [C, H, W] = flattenFrom
            const c = Math.floor(i / (H * W))
            const h = Math.floor((i % (H * W)) / W)
            const w = i % W
            src = (h * W + w) * C + c
          }
          data[o * inDim + i] = kernel[src][o]
        }
      }
      flattenFrom = null
      const activation = config.activation ?? 'linear'
      if (activation !== 'linear' && activation !== 'relu') {
        problems.push(`${layer.name} (activation ${activation})`)
      }
      const artifact: ArtifactLayer = {
        kind: 'dense',
        weights: { shape: [outDim, inDim], data },
        source: layer.name,
      }
      if (biasT) {
        artifact.bias = { shape: [outDim], data: Float32Array.from(biasT.dataSync() as Float32Array) }
      }
      layers.push(artifact)
      if (activation === 'relu') layers.push({ kind: 'relu', source: layer.name })
      shape = [outDim]
    } else {
      problems.push(`${layer.name} (${cls})`)
    }
  }
  flush()
  if (problems.length) {
    throw new UnexportableError(
      `model contains unexportable layers: ${problems.join(', ')}`,
      problems,
    )
  }
  if (shape.length !== 1) {
    throw new UnexportableError('model must end in a logit vector', [])
  }
  return { layers, inputShape, classCount: shape[0], foldingReport: folding }
}

export function exportNetwork(
  model: tf.LayersModel,
  outDir: string,
  sourceId = 'tfjs-model',
): ExportManifest {
  const { layers, inputShape, classCount, foldingReport } = convertModel(model, sourceId)
  mkdirSync(outDir, { recursive: true })
  const specLayers: Record<string, unknown>[] = []
  const mapping: Record<string, string> = {}
  const files: Record<string, Buffer> = {}
  layers.forEach((layer, i) => {
    const entry: Record<string, unknown> = { kind: layer.kind }
    if (layer.weights) {
      const name = `layer${String(i).padStart(2, '0')}_w.pcxt`
      files[name] = encodeTensor(layer.weights.shape, layer.weights.data)
      entry.weights = name
    }
    if (layer.bias) {
      const name = `layer${String(i).padStart(2, '0')}_b.pcxt`
      files[name] = encodeTensor(layer.bias.shape, layer.bias.data)
      entry.bias = name
    }
    if (layer.kind === 'conv2d' || layer.kind === 'maxpool2d' || layer.kind === 'avgpool2d') {
      entry.kernel = layer.kind === 'conv2d' ? layer.weights!.shape[2] : layer.kernel
      entry.stride = layer.stride
      entry.padding = layer.padding
    }
    specLayers.push(entry)
    mapping[String(i)] = layer.source
  })
  const spec = {
    class_count: classCount,
    input_shape: inputShape,
    layers: specLayers,
  }
  // everything converted; only now touch the filesystem
  for (const [name, blob] of Object.entries(files)) {
    const tmp = join(outDir, `.${name}.tmp`)
    writeFileSync(tmp, blob)
    renameSync(tmp, join(outDir, name))
  }
  atomicWrite(join(outDir, 'net.json'), stableStringify(spec) + '\n')
  const checksums: Record<string, string> = {}
  for (const name of [...Object.keys(files), 'net.json'].sort()) {
    checksums[name] = sha256(join(outDir, name))
  }
  const manifest: ExportManifest = {
    source_model: sourceId,
    layer_mapping: mapping,
    folding_report: foldingReport,
    checksums,
    max_cast_error: 0, // tfjs weights are float32 already
  }
  atomicWrite(join(outDir, 'export_manifest.json'), stableStringify(manifest) + '\n')
  return manifest
}

/** Run the model up to `layerName` and write sum-pooled activations. */
export function exportActivations(
  model: tf.LayersModel,
  samples: { shape: number[]; data: Float32Array }[],
  layerName: string,
  outDir: string,
  artifactLayerIndex: number | null = null,
): { matrix: string; sidecar: string; rows: number; channels: number } {
  if (samples.length === 0) {
    throw new Error('empty dataset: nothing to export')
  }
  const layer = model.layers.find((l) => l.name === layerName)
  if (!layer) {
    throw new Error(
      `layer '${layerName}' not found; available: ${model.layers.map((l) => l.name).join(', ')}`,
    )
  }
  const probe = tf.model({ inputs: model.inputs, outputs: layer.output })
  const rows: Float32Array[] = []
  let channels = 0
  for (const sample of samples) {
    const input = toBatchedNhwc(sample)
    const out = probe.predict(input) as tf.Tensor
    const pooled =
      out.rank === 4 ? (tf.sum(out, [1, 2]) as tf.Tensor2D) : (out as tf.Tensor2D)
    const row = pooled.dataSync() as Float32Array
    channels = row.length
    rows.push(Float32Array.from(row))
    tf.dispose([input, out, pooled])
  }
  const matrix = new Float32Array(rows.length * channels)
  rows.forEach((row, i) => matrix.set(row, i * channels))
  mkdirSync(outDir, { recursive: true })
  const matrixName = 'activations.pcxt'
  writeTensor(join(outDir, matrixName), [rows.length, channels], matrix)
  const sidecar = {
    class_conditioning: null,
    concept_count: channels,
    epsilon: null,
    flavor: 'activation',
    layer_index: artifactLayerIndex,
    matrix: matrixName,
    method: 'activation-sum',
    normalized: false,
    sample_ids: samples.map((_, i) => i),
    source_layer: layerName,
  }
  atomicWrite(join(outDir, 'activations.json'), stableStringify(sidecar) + '\n')
  return {
    matrix: join(outDir, matrixName),
    sidecar: join(outDir, 'activations.json'),
    rows: rows.length,
    channels,
  }
}

/** Engine-layout (C,H,W) or flat samples -> batched NHWC tfjs tensor. */
export function toBatchedNhwc(sample: { shape: number[]; data: Float32Array }): tf.Tensor {
  if (sample.shape.length === 1) {
    return tf.tensor2d(sample.data, [1, sample.shape[0]])
  }
  if (sample.shape.length === 3) {
    const [c, h, w] = sample.shape
    const nhwc = new Float32Array(sample.data.length)
    for (let ci = 0; ci < c; ci++) {
      for (let hi = 0; hi < h; hi++) {
        for (let wi = 0; wi < w; wi++) {
          nhwc[(hi * w + wi) * c + ci] = sample.data[(ci * h + hi) * w + wi]
        }
      }
    }
    return tf.tensor4d(nhwc, [1, h, w, c])
  }
  throw new Error(`unsupported sample rank ${sample.shape.length}`)
}
