import type { ReviewApi } from './api.js'
import type { DecisionStatus, DetectionRow, PageInfo, RunDetail, RunSummary } from './types.js'

export type DecisionFilter = 'all' | 'undecided' | 'accepted' | 'rejected'

export interface OverlayToggles {
  boxes: boolean
  masks: boolean
}

/**
 * Everything the screen shows. Built exclusively from service GETs, so a
 * page refresh (or service restart) reconstructs the identical view.
 */
export interface ViewState {
  runs: RunSummary[]
  selectedRun: string | null
  runDetail: RunDetail | null
  detections: DetectionRow[]
  currentPage: string | null
  overlays: OverlayToggles
  decisionFilter: DecisionFilter
  promptText: string
}

export function initialViewState(): ViewState {
  return {
    runs: [],
    selectedRun: null,
    runDetail: null,
    detections: [],
    currentPage: null,
    overlays: { boxes: true, masks: true },
    decisionFilter: 'all',
    promptText: '',
  }
}

/**
 * Rebuild the state from the server. Selections from `prior` are kept when
 * they still exist; everything else falls back to the first available run
 * and page. Local-only knobs (toggles, filter, prompt draft) carry over.
 */
export async function rebuildFromServer(api: ReviewApi, prior?: ViewState): Promise<ViewState> {
  const base = prior ?? initialViewState()
  const runs = await api.listRuns()
  const selectedRun =
    base.selectedRun !== null && runs.some((r) => r.run_id === base.selectedRun)
      ? base.selectedRun
      : (runs[0]?.run_id ?? null)
  let runDetail: RunDetail | null = null
  let detections: DetectionRow[] = []
  let currentPage: string | null = null
  if (selectedRun !== null) {
    runDetail = await api.getRun(selectedRun)
    detections = (await api.listDetections(selectedRun)).detections
    const pages = runDetail.pages
    currentPage =
      base.currentPage !== null && pages.some((p) => p.page_id === base.currentPage)
        ? base.currentPage
        : (pages[0]?.page_id ?? null)
  }
  return {
    runs,
    selectedRun,
    runDetail,
    detections,
    currentPage,
    overlays: { ...base.overlays },
    decisionFilter: base.decisionFilter,
    promptText: base.promptText,
  }
}

export function currentPageInfo(state: ViewState): PageInfo | null {
  if (state.runDetail === null || state.currentPage === null) {
    return null
  }
  return state.runDetail.pages.find((p) => p.page_id === state.currentPage) ?? null
}

/** Detections on the current page that pass the decision filter, in order. */
export function visibleDetections(state: ViewState): DetectionRow[] {
  return state.detections.filter((d) => {
    if (state.currentPage !== null && d.page_id !== state.currentPage) {
      return false
    }
    switch (state.decisionFilter) {
      case 'all':
        return true
      case 'undecided':
        return d.decision === null
      default:
        return d.decision === state.decisionFilter
    }
  })
}

/** Local echo of a decision; the server copy arrives on the next rebuild. */
export function applyDecisionLocally(
  state: ViewState,
  compositeId: string,
  status: DecisionStatus | null,
): ViewState {
  return {
    ...state,
    detections: state.detections.map((d) =>
      d.id === compositeId ? { ...d, decision: status } : d,
    ),
  }
}

export function stepPage(state: ViewState, delta: number): ViewState {
  const pages = state.runDetail?.pages ?? []
  if (pages.length === 0 || state.currentPage === null) {
    return state
  }
  const idx = pages.findIndex((p) => p.page_id === state.currentPage)
  const next = Math.min(Math.max(idx + delta, 0), pages.length - 1)
  return { ...state, currentPage: pages[next]!.page_id }
}
