/** Holder screen flow: unlock -> select -> consent -> live QR.
 *
 * Disclosure is consent-gated by construction: the only code path that
 * issues a mint request starts in confirmConsent(), so a declined or
 * never-shown dialog means zero disclosure-bearing network calls.
 * Dynamic payloads auto-refresh every ttl/2 with a fresh nonce.
 */

import { ApiError, CredentialSummary, HolderApi, MintResponse } from "./api.js"

export type CancelTimer = () => void
export type Scheduler = (fn: () => void, ms: number) => CancelTimer

export interface PresentationRequest {
    credential: CredentialSummary
    mode: "identified" | "deidentified"
    reveal: string[]
    kind: "dynamic" | "static"
}

export type HolderPhase =
    | { phase: "locked"; message?: string }
    | { phase: "selecting"; credentials: CredentialSummary[] }
    | { phase: "consent"; request: PresentationRequest }
    | {
          phase: "presenting"
          request: PresentationRequest
          payload: string
          nonce: string
          exp: number
          secondsLeft: number
      }

const defaultScheduler: Scheduler = (fn, ms) => {
    const id = setTimeout(fn, ms)
    return () => clearTimeout(id)
}

export class HolderFlow {
    state: HolderPhase = { phase: "locked" }
    did: string | null = null
    onChange: (state: HolderPhase) => void = () => {}

    private store = ""
    private passphrase = ""
    private cancelRefresh: CancelTimer | null = null
    private cancelCountdown: CancelTimer | null = null

    constructor(
        private readonly api: HolderApi,
        private readonly dynamicTtlSeconds = 60,
        private readonly schedule: Scheduler = defaultScheduler,
        private readonly now: () => number = () => Math.floor(Date.now() / 1000),
    ) {}

    private set(state: HolderPhase): void {
        this.state = state
        this.onChange(state)
    }

    async unlock(store: string, passphrase: string): Promise<void> {
        try {
            const response = await this.api.unlock(store, passphrase)
            this.store = store
            this.passphrase = passphrase
            this.did = response.did
            this.set({ phase: "selecting", credentials: response.credentials })
        } catch (error) {
            this.set({ phase: "locked", message: describe(error) })
            throw error
        }
    }

    /** Open the consent dialog; no network traffic happens here. */
    requestPresentation(request: PresentationRequest): void {
        if (this.state.phase !== "selecting") {
            throw new Error(`cannot present from phase ${this.state.phase}`)
        }
        this.set({ phase: "consent", request })
    }

    /** Claims the consent dialog must list: exactly what would be disclosed. */
    consentClaims(): string[] {
        return this.state.phase === "consent" ? [...this.state.request.reveal] : []
    }

    declineConsent(): void {
        if (this.state.phase === "consent") {
            this.backToSelection()
        }
    }

    /** The single disclosure path: consent accepted -> mint -> live QR. */
    async confirmConsent(): Promise<void> {
        if (this.state.phase !== "consent") {
            throw new Error("no consent pending")
        }
        const request = this.state.request
        await this.mintAndShow(request)
    }

    private async mintAndShow(request: PresentationRequest): Promise<void> {
        let minted: MintResponse
        try {
            minted = await this.api.mint({
                store: this.store,
                passphrase: this.passphrase,
                credential_id: request.credential.id,
                reveal: request.reveal,
                mode: request.mode,
                kind: request.kind,
            })
        } catch (error) {
            if (error instanceof ApiError && error.status === 401) {
                this.stopTimers()
                this.set({ phase: "locked", message: "session expired; unlock again" })
                return
            }
            throw error
        }
        this.stopTimers()
        this.set({
            phase: "presenting",
            request,
            payload: minted.payload,
            nonce: minted.nonce,
            exp: minted.exp,
            secondsLeft: Math.max(0, minted.exp - this.now()),
        })
        if (request.kind === "dynamic") {
            this.cancelRefresh = this.schedule(
                () => void this.mintAndShow(request),
                (this.dynamicTtlSeconds / 2) * 1000,
            )
        }
        this.cancelCountdown = this.schedule(() => this.tick(), 1000)
    }

    private tick(): void {
        if (this.state.phase !== "presenting") return
        const secondsLeft = Math.max(0, this.state.exp - this.now())
        this.set({ ...this.state, secondsLeft })
        if (secondsLeft > 0) {
            this.cancelCountdown = this.schedule(() => this.tick(), 1000)
        }
    }

    /** Cancel aborts presentation with no further network traffic. */
    backToSelection(): void {
        this.stopTimers()
        void this.api
            .unlock(this.store, this.passphrase)
            .then((r) => this.set({ phase: "selecting", credentials: r.credentials }))
            .catch(() => this.set({ phase: "locked" }))
    }

    stopPresenting(): void {
        this.stopTimers()
    }

    logout(): void {
        this.stopTimers()
        this.store = ""
        this.passphrase = ""
        this.did = null
        this.set({ phase: "locked" })
    }

    private stopTimers(): void {
        this.cancelRefresh?.()
        this.cancelCountdown?.()
        this.cancelRefresh = null
        this.cancelCountdown = null
    }
}

function describe(error: unknown): string {
    if (error instanceof ApiError) return error.code
    return error instanceof Error ? error.message : String(error)
}
