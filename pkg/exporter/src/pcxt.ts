/**
 * PCXT binary tensor container: magic "PCXT", version 0x01, dtype 0x01
 * (float32 little-endian), ndim byte, ndim u64 LE dims, row-major payload.
 */
import { createHash } from 'node:crypto'
import { readFileSync, writeFileSync, mkdirSync, renameSync } from 'node:fs'
import { dirname, join, basename } from 'node:path'

const MAGIC = Buffer.from('PCXT', 'ascii')

export function encodeTensor(shape: number[], data: Float32Array): Buffer {
  const count = shape.reduce((a, b) => a * b, 1)
  if (count !== data.length) {
    throw new Error(`shape ${JSON.stringify(shape)} does not match ${data.length} values`)
  }
  for (const v of data) {
    if (!Number.isFinite(v)) throw new Error('refusing to encode non-finite tensor')
  }
  const header = Buffer.alloc(7 + 8 * shape.length)
  MAGIC.copy(header, 0)
  header.writeUInt8(0x01, 4)
  header.writeUInt8(0x01, 5)
  header.writeUInt8(shape.length, 6)
  shape.forEach((d, i) => header.writeBigUInt64LE(BigInt(d), 7 + 8 * i))
  const payload = Buffer.from(data.buffer, data.byteOffset, data.byteLength)
  return Buffer.concat([header, payload])
}

export function writeTensor(path: string, shape: number[], data: Float32Array): void {
  const blob = encodeTensor(shape, data)
  mkdirSync(dirname(path), { recursive: true })
  const tmp = join(dirname(path), `.${basename(path)}.tmp`)
  writeFileSync(tmp, blob)
  renameSync(tmp, path)
}

export function readTensor(path: string): { shape: number[]; data: Float32Array } {
  const blob = readFileSync(path)
  if (!blob.subarray(0, 4).equals(MAGIC)) throw new Error(`bad magic in ${path}`)
  if (blob.readUInt8(4) !== 0x01 || blob.readUInt8(5) !== 0x01) {
    throw new Error(`unsupported version/dtype in ${path}`)
  }
  const ndim = blob.readUInt8(6)
  const shape: number[] = []
  for (let i = 0; i < ndim; i++) shape.push(Number(blob.readBigUInt64LE(7 + 8 * i)))
  const count = shape.reduce((a, b) => a * b, 1)
  const start = 7 + 8 * ndim
  if (blob.length !== start + 4 * count) throw new Error(`truncated tensor file ${path}`)
  const data = new Float32Array(count)
  for (let i = 0; i < count; i++) data[i] = blob.readFloatLE(start + 4 * i)
  return { shape, data }
}

export function sha256(path: string): string {
  return createHash('sha256').update(readFileSync(path)).digest('hex')
}
