import type { MaskRle } from './types.js'

/**
 * Decode uncompressed column-major RLE into a row-major bit grid.
 * Counts alternate background/foreground starting with background; a
 * leading 0 means pixel (0, 0) is foreground.
 */
export function rleDecode(mask: MaskRle): Uint8Array {
  const [height, width] = mask.size
  const total = height * width
  const sum = mask.counts.reduce((a, b) => a + b, 0)
  if (sum !== total) {
    throw new Error(`RLE counts sum to ${sum}, mask is ${height}x${width}=${total}`)
  }
  const grid = new Uint8Array(total) // row-major
  let pos = 0 // column-major position
  let foreground = false
  for (const count of mask.counts) {
    if (foreground) {
      for (let i = pos; i < pos + count; i++) {
        const row = i % height
        const col = Math.floor(i / height)
        grid[row * width + col] = 1
      }
    }
    pos += count
    foreground = !foreground
  }
  return grid
}

/** Sum of foreground pixels, useful for badges and sanity checks. */
export function maskArea(mask: MaskRle): number {
  let area = 0
  for (let i = 1; i < mask.counts.length; i += 2) {
    area += mask.counts[i] ?? 0
  }
  return area
}
