import { describe, expect, it } from 'vitest'

import { ApiError, ReviewApi } from '../src/api.js'

interface Captured {
  url: string
  method: string
  headers: Record<string, string>
  body: unknown
}

function stubFetch(status: number, body: unknown) {
  const calls: Captured[] = []
  const fetchFn = (async (input: RequestInfo | URL, init?: RequestInit) => {
    calls.push({
      url: String(input),
      method: init?.method ?? 'GET',
      headers: (init?.headers ?? {}) as Record<string, string>,
      body: init?.body !== undefined ? JSON.parse(init.body as string) : undefined,
    })
    return {
      ok: status >= 200 && status < 300,
      status,
      statusText: `HTTP ${status}`,
      json: async () => body,
    } as Response
  }) as typeof fetch
  return { fetchFn, calls }
}

describe('ReviewApi', () => {
  it('lists runs from the runs envelope', async () => {
    const { fetchFn, calls } = stubFetch(200, { runs: [{ run_id: 'run1' }] })
    const api = new ReviewApi({ baseUrl: 'http://svc:8004', fetchFn })
    const runs = await api.listRuns()
    expect(runs).toEqual([{ run_id: 'run1' }])
    expect(calls[0]!.url).toBe('http://svc:8004/api/runs')
  })

  it('builds detection queries with paging and page filter', async () => {
    const { fetchFn, calls } = stubFetch(200, { total: 0, offset: 5, detections: [] })
    const api = new ReviewApi({ fetchFn })
    await api.listDetections('run1', { page: 'p01', offset: 5, limit: 50 })
    expect(calls[0]!.url).toBe('/api/runs/run1/detections?page=p01&offset=5&limit=50')
  })

  it('posts decisions with a JSON body', async () => {
    const { fetchFn, calls } = stubFetch(200, { detection_id: 'run1~p01~0000', status: 'accepted' })
    const api = new ReviewApi({ fetchFn })
    await api.postDecision('run1~p01~0000', 'accepted', 'dana')
    expect(calls[0]!.method).toBe('POST')
    expect(calls[0]!.url).toBe('/api/detections/run1~p01~0000/decision')
    expect(calls[0]!.body).toEqual({ status: 'accepted', reviewer: 'dana' })
    expect(calls[0]!.headers['Content-Type']).toBe('application/json')
  })

  it('posts sessions with page ids and a suite draft', async () => {
    const { fetchFn, calls } = stubFetch(200, { run_id: 'session-x', n_detections: 1 })
    const api = new ReviewApi({ fetchFn })
    const suite = {
      suite_id: 'playground',
      groups: [
        { class_name: 'figure', phrases: ['figure', 'diagram'], box_threshold: 0.35, text_threshold: 0.35 },
      ],
    }
    await api.createSession(['p01', 'p02'], suite, false)
    expect(calls[0]!.url).toBe('/api/sessions')
    expect(calls[0]!.body).toEqual({ page_ids: ['p01', 'p02'], suite, segment: false })
  })

  it('attaches the bearer token to every request', async () => {
    const { fetchFn, calls } = stubFetch(200, { status: 'ok' })
    const api = new ReviewApi({ fetchFn, token: 'sesame' })
    await api.health()
    expect(calls[0]!.headers['Authorization']).toBe('Bearer sesame')
  })

  it('surfaces the server detail message on errors', async () => {
    const { fetchFn } = stubFetch(404, { detail: "unknown run 'ghost'" })
    const api = new ReviewApi({ fetchFn })
    const err = await api.getRun('ghost').catch((e: unknown) => e)
    expect(err).toBeInstanceOf(ApiError)
    expect((err as ApiError).status).toBe(404)
    expect((err as ApiError).message).toBe("unknown run 'ghost'")
  })

  it('builds image urls without fetching', () => {
    const api = new ReviewApi({ baseUrl: 'http://svc:8004' })
    expect(api.pageImageUrl('p01')).toBe('http://svc:8004/api/pages/p01/image?space=original')
    expect(api.pageImageUrl('p01', 'preprocessed')).toBe(
      'http://svc:8004/api/pages/p01/image?space=preprocessed',
    )
  })
})
