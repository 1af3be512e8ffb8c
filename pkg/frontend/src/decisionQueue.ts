import type { DecisionStatus } from './types.js'

export interface DecisionQueueDeps {
  /** POST the decision to the server. */
  post: (compositeId: string, status: DecisionStatus) => Promise<unknown>
  /** Reflect a decision in the view (null restores "undecided"). */
  apply: (compositeId: string, status: DecisionStatus | null) => void
  onError?: (compositeId: string, error: unknown) => void
}

/**
 * FIFO queue for accept/reject posts. The view updates optimistically the
 * moment a decision is submitted; if the POST later fails, the view rolls
 * back to the last server-confirmed value. At most one POST is in flight.
 */
export class DecisionQueue {
  private chain: Promise<void> = Promise.resolve()
  private confirmed = new Map<string, DecisionStatus | null>()
  private optimistic = new Map<string, DecisionStatus>()
  private inFlight = 0

  constructor(private readonly deps: DecisionQueueDeps) {}

  /** Number of submitted decisions not yet settled by the server. */
  get pending(): number {
    return this.inFlight
  }

  /** Seed the last known server state for rollback, e.g. after a refresh. */
  remember(compositeId: string, status: DecisionStatus | null): void {
    this.confirmed.set(compositeId, status)
    this.optimistic.delete(compositeId)
  }

  submit(compositeId: string, status: DecisionStatus): Promise<void> {
    this.optimistic.set(compositeId, status)
    this.deps.apply(compositeId, status)
    this.inFlight += 1
    this.chain = this.chain.then(async () => {
      try {
        await this.deps.post(compositeId, status)
        this.confirmed.set(compositeId, status)
        if (this.optimistic.get(compositeId) === status) {
          this.optimistic.delete(compositeId)
        }
      } catch (error) {
        // Roll the view back only if no newer submit has repainted it.
        if (this.optimistic.get(compositeId) === status) {
          this.optimistic.delete(compositeId)
          this.deps.apply(compositeId, this.confirmed.get(compositeId) ?? null)
        }
        this.deps.onError?.(compositeId, error)
      } finally {
        this.inFlight -= 1
      }
    })
    return this.chain
  }

  /** Resolves once every queued POST has settled. */
  drain(): Promise<void> {
    return this.chain
  }
}
