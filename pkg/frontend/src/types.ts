/** Payload shapes of the review service REST API. */

export type BoxTuple = [number, number, number, number] // x0, y0, x1, y1

export interface MaskRle {
  size: [number, number] // height, width
  counts: number[]
}

export type DecisionStatus = 'accepted' | 'rejected'

export interface DetectionRow {
  id: string // composite "<run>~<page>~<seq>"
  local_id: string
  page_id: string
  class_name: string
  phrase: string
  score: number
  box: BoxTuple // original-image pixels
  box_preprocessed: BoxTuple
  mask: MaskRle | null
  decision: DecisionStatus | null
}

export interface RunSummary {
  run_id: string
  created_at: string
  tool_version: string
  suite_id: string | null
  session: SessionInfo | null
  n_pages: number
  n_detections: number
  n_accepted: number
  n_rejected: number
}

export interface SessionInfo {
  session_id: string
  created_at: string
  parent_run: Record<string, string>
}

export interface PageInfo {
  page_id: string
  original: { width: number; height: number }
  transform: { sx: number; sy: number }
}

export interface RunDetail extends RunSummary {
  config: Record<string, unknown>
  pages: PageInfo[]
  errors: unknown[]
  timings: Record<string, number>
}

export interface DetectionPage {
  total: number
  offset: number
  detections: DetectionRow[]
}

export interface PromptGroupDraft {
  class_name: string
  phrases: string[]
  box_threshold: number
  text_threshold: number
}

export interface SuiteDraft {
  suite_id: string
  nms_iou?: number
  groups: PromptGroupDraft[]
}

export interface SessionResult {
  session_id: string
  run_id: string
  n_detections: number
  n_errors: number
  backend_health: Record<string, unknown>
}

export interface ExportResult {
  output_root: string
  coco: string
  images: number
  annotations: number
  crops: number
  masks: number
}

export interface DecisionResult {
  detection_id: string
  status: DecisionStatus
  reviewer: string
  timestamp: string
}
