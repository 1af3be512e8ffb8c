import type { BoxTuple, PageInfo } from './types.js'

/**
 * Overlay geometry. Boxes are always taken in original-image coordinates
 * and scaled to the viewport; nothing downstream of the server's
 * original-space box is trusted for placement.
 */

export interface ViewportSize {
  width: number
  height: number
}

export interface ViewportRect {
  left: number
  top: number
  width: number
  height: number
}

export function viewportScale(page: PageInfo, viewport: ViewportSize): { sx: number; sy: number } {
  return {
    sx: viewport.width / page.original.width,
    sy: viewport.height / page.original.height,
  }
}

/** Original-space box -> viewport CSS pixels (unrounded). */
export function boxToViewport(box: BoxTuple, page: PageInfo, viewport: ViewportSize): ViewportRect {
  const { sx, sy } = viewportScale(page, viewport)
  const [x0, y0, x1, y1] = box
  return {
    left: x0 * sx,
    top: y0 * sy,
    width: (x1 - x0) * sx,
    height: (y1 - y0) * sy,
  }
}

/** Snap to whole device pixels, keeping every edge within 0.5 px. */
export function snapRect(rect: ViewportRect): ViewportRect {
  const left = Math.round(rect.left)
  const top = Math.round(rect.top)
  return {
    left,
    top,
    width: Math.round(rect.left + rect.width) - left,
    height: Math.round(rect.top + rect.height) - top,
  }
}

export interface OverlayStyle {
  stroke: string
  lineWidth: number
  lineDash: number[]
}

const CLASS_PALETTE = ['#e53935', '#1e88e5', '#43a047', '#fb8c00', '#8e24aa', '#00897b']

export function classColor(className: string, classNames: readonly string[]): string {
  const idx = classNames.indexOf(className)
  const pos = idx >= 0 ? idx : classNames.length
  return CLASS_PALETTE[pos % CLASS_PALETTE.length]!
}

// Baseline run draws solid; re-detection sessions draw dashed, each session
// with its own dash pattern so two sessions stay tellable apart.
const SESSION_DASHES: number[][] = [[6, 4], [2, 3], [10, 3, 2, 3], [14, 4]]

export function sessionLineDash(sourceIndex: number): number[] {
  if (sourceIndex <= 0) {
    return []
  }
  return SESSION_DASHES[(sourceIndex - 1) % SESSION_DASHES.length]!
}

export function overlayStyle(
  className: string,
  classNames: readonly string[],
  sourceIndex: number,
): OverlayStyle {
  return {
    stroke: classColor(className, classNames),
    lineWidth: 2,
    lineDash: sessionLineDash(sourceIndex),
  }
}

/** The part of CanvasRenderingContext2D the box overlay needs. */
export interface StrokeSurface {
  strokeStyle: string | CanvasGradient | CanvasPattern
  lineWidth: number
  setLineDash(segments: number[]): void
  strokeRect(x: number, y: number, w: number, h: number): void
}

export function drawBoxOverlay(
  surface: StrokeSurface,
  box: BoxTuple,
  page: PageInfo,
  viewport: ViewportSize,
  style: OverlayStyle,
): ViewportRect {
  const rect = snapRect(boxToViewport(box, page, viewport))
  surface.strokeStyle = style.stroke
  surface.lineWidth = style.lineWidth
  surface.setLineDash(style.lineDash)
  surface.strokeRect(rect.left, rect.top, rect.width, rect.height)
  return rect
}
