/**
 * Deterministic toy models for demos and round-trip tests. Weights come
 * from a seeded PRNG (not tfjs initializers) so exports are byte-stable.
 */
import * as tf from '@tensorflow/tfjs'

export function mulberry32(seed: number): () => number {
  let a = seed >>> 0
  return () => {
    a = (a + 0x6d2b79f5) >>> 0
    let t = a
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

export function randomArray(rng: () => number, count: number, scale = 1): Float32Array {
  const out = new Float32Array(count)
  for (let i = 0; i < count; i++) {
    // Box-Muller from two uniforms
    const u = Math.max(rng(), 1e-12)
    const v = rng()
    out[i] = Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v) * scale
  }
  return out
}

/** conv(+bias) -> batch-norm -> relu -> maxpool -> flatten -> dense logits. */
export function buildToyConvModel(seed = 7): tf.LayersModel {
  const rng = mulberry32(seed)
  const model = tf.sequential()
  model.add(
    tf.layers.conv2d({
      inputShape: [6, 6, 2],
      filters: 4,
      kernelSize: 3,
      strides: 1,
      padding: 'valid',
      useBias: true,
      name: 'conv0',
    }),
  )
  model.add(tf.layers.batchNormalization({ name: 'bn0' }))
  model.add(tf.layers.activation({ activation: 'relu', name: 'relu0' }))
  model.add(tf.layers.maxPooling2d({ poolSize: 2, strides: 2, name: 'pool0' }))
  model.add(tf.layers.flatten({ name: 'flatten0' }))
  model.add(tf.layers.dense({ units: 3, name: 'head' }))

  const conv = model.getLayer('conv0')
  conv.setWeights([
    tf.tensor4d(randomArray(rng, 3 * 3 * 2 * 4, 0.5), [3, 3, 2, 4]),
    tf.tensor1d(randomArray(rng, 4, 0.2)),
  ])
  const bn = model.getLayer('bn0')
  bn.setWeights([
    tf.tensor1d(Float32Array.from({ length: 4 }, () => 0.5 + rng())), // gamma
    tf.tensor1d(randomArray(rng, 4, 0.3)), // beta
    tf.tensor1d(randomArray(rng, 4, 0.4)), // moving mean
    tf.tensor1d(Float32Array.from({ length: 4 }, () => 0.5 + rng())), // moving variance
  ])
  const head = model.getLayer('head')
  head.setWeights([
    tf.tensor2d(randomArray(rng, 4 * 2 * 2 * 3, 0.5), [16, 3]),
    tf.tensor1d(randomArray(rng, 3, 0.2)),
  ])
  return model
}

/** Two dense layers with a ReLU between them. */
export function buildToyDenseModel(seed = 11): tf.LayersModel {
  const rng = mulberry32(seed)
  const model = tf.sequential()
  model.add(
    tf.layers.dense({ inputShape: [5], units: 4, activation: 'relu', name: 'fc0' }),
  )
  model.add(tf.layers.dense({ units: 2, name: 'fc1' }))
  model.getLayer('fc0').setWeights([
    tf.tensor2d(randomArray(rng, 5 * 4, 0.6), [5, 4]),
    tf.tensor1d(randomArray(rng, 4, 0.2)),
  ])
  model.getLayer('fc1').setWeights([
    tf.tensor2d(randomArray(rng, 4 * 2, 0.6), [4, 2]),
    tf.tensor1d(randomArray(rng, 2, 0.2)),
  ])
  return model
}

/** Dense layer with identity weights and no bias. */
export function buildIdentityModel(n = 4): tf.LayersModel {
  const model = tf.sequential()
  model.add(tf.layers.dense({ inputShape: [n], units: n, useBias: false, name: 'id' }))
  const eye = new Float32Array(n * n)
  for (let i = 0; i < n; i++) eye[i * n + i] = 1
  model.getLayer('id').setWeights([tf.tensor2d(eye, [n, n])])
  return model
}
