import type {
  DecisionResult,
  DecisionStatus,
  DetectionPage,
  ExportResult,
  RunDetail,
  RunSummary,
  SessionResult,
  SuiteDraft,
} from './types.js'

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message)
    this.name = 'ApiError'
  }
}

export interface ApiOptions {
  baseUrl?: string
  token?: string
  fetchFn?: typeof fetch
}

/** Typed client for the review service; all UI state flows through here. */
export class ReviewApi {
  private readonly baseUrl: string
  private readonly token: string | undefined
  private readonly fetchFn: typeof fetch

  constructor(opts: ApiOptions = {}) {
    this.baseUrl = (opts.baseUrl ?? '').replace(/\/$/, '')
    this.token = opts.token
    this.fetchFn = opts.fetchFn ?? fetch
  }

  private async request<T>(path: string, init: RequestInit = {}): Promise<T> {
    const headers: Record<string, string> = { ...(init.headers as Record<string, string>) }
    if (init.body !== undefined) {
      headers['Content-Type'] = 'application/json'
    }
    if (this.token) {
      headers['Authorization'] = `Bearer ${this.token}`
    }
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, { ...init, headers })
    if (!resp.ok) {
      let detail = resp.statusText
      try {
        const body = (await resp.json()) as { detail?: unknown }
        if (body.detail !== undefined) {
          detail = typeof body.detail === 'string' ? body.detail : JSON.stringify(body.detail)
        }
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(resp.status, detail)
    }
    return (await resp.json()) as T
  }

  async health(): Promise<{ status: string }> {
    return this.request('/api/health')
  }

  async listRuns(): Promise<RunSummary[]> {
    const body = await this.request<{ runs: RunSummary[] }>('/api/runs')
    return body.runs
  }

  async getRun(runId: string): Promise<RunDetail> {
    return this.request(`/api/runs/${encodeURIComponent(runId)}`)
  }

  async listDetections(
    runId: string,
    opts: { page?: string; offset?: number; limit?: number } = {},
  ): Promise<DetectionPage> {
    const params = new URLSearchParams()
    if (opts.page !== undefined) params.set('page', opts.page)
    if (opts.offset !== undefined) params.set('offset', String(opts.offset))
    if (opts.limit !== undefined) params.set('limit', String(opts.limit))
    const qs = params.toString()
    return this.request(`/api/runs/${encodeURIComponent(runId)}/detections${qs ? `?${qs}` : ''}`)
  }

  pageImageUrl(pageId: string, space: 'original' | 'preprocessed' = 'original'): string {
    return `${this.baseUrl}/api/pages/${encodeURIComponent(pageId)}/image?space=${space}`
  }

  async postDecision(
    compositeId: string,
    status: DecisionStatus,
    reviewer = '',
  ): Promise<DecisionResult> {
    return this.request(`/api/detections/${encodeURIComponent(compositeId)}/decision`, {
      method: 'POST',
      body: JSON.stringify({ status, reviewer }),
    })
  }

  async createSession(
    pageIds: string[],
    suite: SuiteDraft | string,
    segment?: boolean,
  ): Promise<SessionResult> {
    const body: Record<string, unknown> = { page_ids: pageIds, suite }
    if (segment !== undefined) {
      body['segment'] = segment
    }
    return this.request('/api/sessions', { method: 'POST', body: JSON.stringify(body) })
  }

  async exportRun(runId: string, outDir?: string): Promise<ExportResult> {
    return this.request(`/api/runs/${encodeURIComponent(runId)}/export`, {
      method: 'POST',
      body: JSON.stringify(outDir ? { out_dir: outDir } : {}),
    })
  }
}
