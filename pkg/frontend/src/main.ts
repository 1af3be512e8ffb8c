import { ApiError, ReviewApi } from './api.js'
import { DecisionQueue } from './decisionQueue.js'
import {
  boxToViewport,
  drawBoxOverlay,
  overlayStyle,
  type ViewportSize,
} from './overlayGeometry.js'
import { parsePromptNotation } from './promptNotation.js'
import { rleDecode } from './rle.js'
import type { DetectionRow, MaskRle, RunSummary, SuiteDraft } from './types.js'
import {
  applyDecisionLocally,
  currentPageInfo,
  initialViewState,
  rebuildFromServer,
  stepPage,
  visibleDetections,
  type ViewState,
} from './viewState.js'

const params = new URLSearchParams(location.search)
const api = new ReviewApi({
  baseUrl: params.get('service') ?? '',
  token: params.get('token') ?? undefined,
})

let state: ViewState = initialViewState()
let selectedDetection: string | null = null
let hoveredDetection: string | null = null
let sessionBusy = false

const queue = new DecisionQueue({
  post: (id, status) => api.postDecision(id, status),
  apply: (id, status) => {
    state = applyDecisionLocally(state, id, status)
    renderDetectionList()
    renderOverlays()
  },
  onError: (id, error) => setStatus(`decision on ${id} failed: ${describe(error)}`, true),
})

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id)
  if (!node) throw new Error(`missing element #${id}`)
  return node as T
}

const runSelect = el<HTMLSelectElement>('run-select')
const pageLabel = el<HTMLElement>('page-label')
const viewer = el<HTMLDivElement>('viewer')
const pageImage = el<HTMLImageElement>('page-image')
const overlayCanvas = el<HTMLCanvasElement>('overlay-canvas')
const hoverLabel = el<HTMLDivElement>('hover-label')
const detectionList = el<HTMLUListElement>('detection-list')
const statusLine = el<HTMLElement>('status-line')
const promptInput = el<HTMLTextAreaElement>('prompt-input')
const classInput = el<HTMLInputElement>('class-input')
const sessionButton = el<HTMLButtonElement>('session-button')
const exportButton = el<HTMLButtonElement>('export-button')
const filterSelect = el<HTMLSelectElement>('filter-select')
const boxesToggle = el<HTMLInputElement>('boxes-toggle')
const masksToggle = el<HTMLInputElement>('masks-toggle')

function describe(error: unknown): string {
  if (error instanceof ApiError) return `${error.status}: ${error.message}`
  return error instanceof Error ? error.message : String(error)
}

function setStatus(text: string, isError = false): void {
  statusLine.textContent = text
  statusLine.classList.toggle('error', isError)
}

function suiteClasses(): string[] {
  const names = new Set(state.detections.map((d) => d.class_name))
  return [...names].sort()
}

/** Dash index per run: the baseline run is 0, each session run 1, 2, ... */
function sourceIndex(runId: string): number {
  const sessions = state.runs.filter((r) => r.session !== null).map((r) => r.run_id)
  const idx = sessions.indexOf(runId)
  return idx >= 0 ? idx + 1 : 0
}

function viewport(): ViewportSize {
  return { width: pageImage.clientWidth, height: pageImage.clientHeight }
}

function renderRunList(): void {
  runSelect.replaceChildren(
    ...state.runs.map((r: RunSummary) => {
      const opt = document.createElement('option')
      opt.value = r.run_id
      const kind = r.session ? 'session' : 'run'
      opt.textContent = `${r.run_id} (${kind}, ${r.n_detections} det, ${r.n_accepted}+/${r.n_rejected}-)`
      opt.selected = r.run_id === state.selectedRun
      return opt
    }),
  )
}

function renderPageLabel(): void {
  const pages = state.runDetail?.pages ?? []
  const idx = pages.findIndex((p) => p.page_id === state.currentPage)
  pageLabel.textContent =
    idx >= 0 ? `page ${idx + 1}/${pages.length}: ${state.currentPage}` : 'no pages'
}

function renderDetectionList(): void {
  const rows = visibleDetections(state)
  detectionList.replaceChildren(
    ...rows.map((d) => {
      const li = document.createElement('li')
      li.dataset['id'] = d.id
      const mark = d.decision === 'accepted' ? '+' : d.decision === 'rejected' ? '-' : ' '
      li.textContent = `[${mark}] ${d.class_name} "${d.phrase}" ${d.score.toFixed(3)}`
      li.title = `${d.phrase} (${d.score.toFixed(3)})`
      li.classList.toggle('selected', d.id === selectedDetection)
      li.classList.toggle('rejected', d.decision === 'rejected')
      li.addEventListener('click', () => {
        selectedDetection = d.id
        renderDetectionList()
        renderOverlays()
      })
      li.addEventListener('mouseenter', () => {
        hoveredDetection = d.id
        renderOverlays()
      })
      li.addEventListener('mouseleave', () => {
        hoveredDetection = null
        renderOverlays()
      })
      return li
    }),
  )
}

function drawMask(ctx: CanvasRenderingContext2D, mask: MaskRle, color: string): void {
  const [h, w] = mask.size
  const grid = rleDecode(mask)
  const off = document.createElement('canvas')
  off.width = w
  off.height = h
  const offCtx = off.getContext('2d')
  if (!offCtx) return
  const imageData = offCtx.createImageData(w, h)
  const rgb = [
    parseInt(color.slice(1, 3), 16),
    parseInt(color.slice(3, 5), 16),
    parseInt(color.slice(5, 7), 16),
  ]
  for (let i = 0; i < grid.length; i++) {
    if (grid[i]) {
      imageData.data[i * 4] = rgb[0]!
      imageData.data[i * 4 + 1] = rgb[1]!
      imageData.data[i * 4 + 2] = rgb[2]!
      imageData.data[i * 4 + 3] = 90
    }
  }
  offCtx.putImageData(imageData, 0, 0)
  // The mask covers the preprocessed square, which maps onto the full page.
  ctx.imageSmoothingEnabled = false
  ctx.drawImage(off, 0, 0, overlayCanvas.width, overlayCanvas.height)
}

function renderOverlays(): void {
  const page = currentPageInfo(state)
  const vp = viewport()
  overlayCanvas.width = vp.width
  overlayCanvas.height = vp.height
  const ctx = overlayCanvas.getContext('2d')
  if (!ctx || !page || vp.width === 0) return
  ctx.clearRect(0, 0, vp.width, vp.height)
  const classes = suiteClasses()
  const runIdx = state.selectedRun !== null ? sourceIndex(state.selectedRun) : 0
  for (const d of visibleDetections(state)) {
    if (state.overlays.masks && d.mask) {
      drawMask(ctx, d.mask, '#1e88e5')
    }
    if (state.overlays.boxes) {
      const style = overlayStyle(d.class_name, classes, runIdx)
      if (d.id === selectedDetection || d.id === hoveredDetection) {
        style.lineWidth = 3
      }
      if (d.decision === 'rejected') {
        style.stroke = '#9e9e9e'
      }
      drawBoxOverlay(ctx, d.box, page, vp, style)
    }
  }
}

function renderImage(): void {
  if (state.currentPage !== null) {
    pageImage.src = api.pageImageUrl(state.currentPage)
    pageImage.onload = () => renderOverlays()
  } else {
    pageImage.removeAttribute('src')
    renderOverlays()
  }
}

function renderAll(): void {
  renderRunList()
  renderPageLabel()
  renderDetectionList()
  renderImage()
  for (const d of state.detections) {
    queue.remember(d.id, d.decision)
  }
}

async function refresh(keepSelection = true): Promise<void> {
  try {
    state = await rebuildFromServer(api, keepSelection ? state : undefined)
    const ids = new Set(state.detections.map((d) => d.id))
    if (selectedDetection !== null && !ids.has(selectedDetection)) {
      selectedDetection = null
    }
    renderAll()
    setStatus(`${state.runs.length} run(s) loaded`)
  } catch (error) {
    setStatus(`refresh failed: ${describe(error)}`, true)
  }
}

function stepSelection(delta: number): void {
  const rows = visibleDetections(state)
  if (rows.length === 0) return
  const idx = rows.findIndex((d) => d.id === selectedDetection)
  const next = idx < 0 ? 0 : Math.min(Math.max(idx + delta, 0), rows.length - 1)
  selectedDetection = rows[next]!.id
  renderDetectionList()
  renderOverlays()
}

function decide(status: 'accepted' | 'rejected'): void {
  if (selectedDetection === null) {
    setStatus('no detection selected', true)
    return
  }
  void queue.submit(selectedDetection, status)
  stepSelection(1)
}

async function submitSession(): Promise<void> {
  if (sessionBusy) return
  const pageIds = state.currentPage !== null ? [state.currentPage] : []
  if (pageIds.length === 0) {
    setStatus('no page selected', true)
    return
  }
  let phrases: string[]
  try {
    phrases = parsePromptNotation(promptInput.value)
  } catch (error) {
    setStatus(describe(error), true)
    return
  }
  const suite: SuiteDraft = {
    suite_id: 'playground',
    groups: [
      {
        class_name: classInput.value.trim() || 'VisualElement',
        phrases,
        box_threshold: 0.35,
        text_threshold: 0.35,
      },
    ],
  }
  sessionBusy = true
  sessionButton.disabled = true
  setStatus('running session...')
  try {
    const result = await api.createSession(pageIds, suite)
    await refresh()
    state = { ...state, selectedRun: result.run_id }
    state = await rebuildFromServer(api, state)
    renderAll()
    setStatus(`session ${result.run_id}: ${result.n_detections} detection(s), ${result.n_errors} error(s)`)
  } catch (error) {
    setStatus(`session failed: ${describe(error)}`, true)
  } finally {
    sessionBusy = false
    sessionButton.disabled = promptInput.value.trim() === ''
  }
}

async function runExport(): Promise<void> {
  if (state.selectedRun === null) return
  try {
    const result = await api.exportRun(state.selectedRun)
    setStatus(
      `exported ${result.annotations} annotation(s), ${result.images} image(s) to ${result.output_root}`,
    )
  } catch (error) {
    setStatus(`export failed: ${describe(error)}`, true)
  }
}

function hitTest(x: number, y: number): DetectionRow | null {
  const page = currentPageInfo(state)
  if (!page) return null
  const vp = viewport()
  const rows = visibleDetections(state)
  for (let i = rows.length - 1; i >= 0; i--) {
    const rect = boxToViewport(rows[i]!.box, page, vp)
    if (x >= rect.left && x <= rect.left + rect.width && y >= rect.top && y <= rect.top + rect.height) {
      return rows[i]!
    }
  }
  return null
}

// ---- event wiring ----

runSelect.addEventListener('change', () => {
  state = { ...state, selectedRun: runSelect.value, currentPage: null }
  selectedDetection = null
  void refresh()
})

filterSelect.addEventListener('change', () => {
  state = { ...state, decisionFilter: filterSelect.value as ViewState['decisionFilter'] }
  renderDetectionList()
  renderOverlays()
})

boxesToggle.addEventListener('change', () => {
  state = { ...state, overlays: { ...state.overlays, boxes: boxesToggle.checked } }
  renderOverlays()
})

masksToggle.addEventListener('change', () => {
  state = { ...state, overlays: { ...state.overlays, masks: masksToggle.checked } }
  renderOverlays()
})

promptInput.addEventListener('input', () => {
  sessionButton.disabled = promptInput.value.trim() === '' || sessionBusy
})

sessionButton.addEventListener('click', () => void submitSession())
exportButton.addEventListener('click', () => void runExport())

overlayCanvas.addEventListener('mousemove', (ev) => {
  const rect = overlayCanvas.getBoundingClientRect()
  const hit = hitTest(ev.clientX - rect.left, ev.clientY - rect.top)
  hoveredDetection = hit?.id ?? null
  if (hit) {
    hoverLabel.textContent = `${hit.phrase} (${hit.score.toFixed(3)})`
    hoverLabel.style.left = `${ev.clientX - rect.left + 12}px`
    hoverLabel.style.top = `${ev.clientY - rect.top + 12}px`
    hoverLabel.hidden = false
  } else {
    hoverLabel.hidden = true
  }
  renderOverlays()
})

overlayCanvas.addEventListener('mouseleave', () => {
  hoveredDetection = null
  hoverLabel.hidden = true
  renderOverlays()
})

overlayCanvas.addEventListener('click', (ev) => {
  const rect = overlayCanvas.getBoundingClientRect()
  const hit = hitTest(ev.clientX - rect.left, ev.clientY - rect.top)
  if (hit) {
    selectedDetection = hit.id
    renderDetectionList()
    renderOverlays()
  }
})

document.addEventListener('keydown', (ev) => {
  if (ev.target instanceof HTMLTextAreaElement || ev.target instanceof HTMLInputElement) {
    return
  }
  switch (ev.key) {
    case 'a':
      decide('accepted')
      break
    case 'r':
      decide('rejected')
      break
    case 'j':
    case 'ArrowDown':
      stepSelection(1)
      ev.preventDefault()
      break
    case 'k':
    case 'ArrowUp':
      stepSelection(-1)
      ev.preventDefault()
      break
    case 'ArrowRight':
      state = stepPage(state, 1)
      selectedDetection = null
      renderPageLabel()
      renderDetectionList()
      renderImage()
      break
    case 'ArrowLeft':
      state = stepPage(state, -1)
      selectedDetection = null
      renderPageLabel()
      renderDetectionList()
      renderImage()
      break
  }
})

new ResizeObserver(() => renderOverlays()).observe(viewer)

sessionButton.disabled = true
void refresh(false)
