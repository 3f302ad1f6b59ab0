/** Typed client for the orchestrator HTTP API - the UI's only channel. */

export interface CredentialSummary {
    id: string
    credential_type: string
    expires_at: number
    claims: string[]
}

export interface UnlockResponse {
    did: string
    credentials: CredentialSummary[]
}

export interface MintResponse {
    payload: string
    exp: number
    nonce: string
}

export interface VerifiedStatus {
    v: number
    outcome: "accept" | "reject"
    reason: string | null
    detail: string | null
    claims: Record<string, string> | null
    credential_type: string | null
    subject: string | null
    mode: string | null
    checked_at: number
    ledger_check: "passed" | "skipped" | "failed"
}

export interface PolicyDecision {
    allow: boolean
    reason: string | null
}

export interface MintRequest {
    store: string
    passphrase: string
    credential_id?: string
    credential_type?: string
    reveal: string[]
    mode: "identified" | "deidentified"
    kind: "dynamic" | "static"
}

/** The holder screen's server surface. */
export interface HolderApi {
    unlock(store: string, passphrase: string): Promise<UnlockResponse>
    mint(request: MintRequest): Promise<MintResponse>
}

/** The verifier screen's server surface. */
export interface VerifierApi {
    verify(payload: string, offline?: boolean, verifier?: string): Promise<VerifiedStatus>
    evalPolicy(
        credentialType: string,
        result: string,
        ageHours: number,
        verifier?: string,
    ): Promise<PolicyDecision>
}

export class ApiError extends Error {
    constructor(readonly status: number, readonly code: string, detail: string) {
        super(`${code} (${status}): ${detail}`)
    }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>

export class ApiClient {
    constructor(
        readonly baseUrl: string,
        private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
    ) {}

    private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
        const response = await this.fetchImpl(this.baseUrl + path, {
            method,
            headers: body === undefined ? undefined : { "Content-Type": "application/json" },
            body: body === undefined ? undefined : JSON.stringify(body),
        })
        let parsed: any = null
        try {
            parsed = await response.json()
        } catch {
            /* non-JSON error body */
        }
        if (!response.ok) {
            throw new ApiError(
                response.status,
                parsed?.error ?? `HTTP${response.status}`,
                parsed?.detail ?? "",
            )
        }
        return parsed as T
    }

    unlock(store: string, passphrase: string): Promise<UnlockResponse> {
        return this.call("POST", "/present/unlock", { store, passphrase })
    }

    mint(request: MintRequest): Promise<MintResponse> {
        return this.call("POST", "/present/mint", request)
    }

    verify(payload: string, offline = false, verifier?: string): Promise<VerifiedStatus> {
        return this.call("POST", "/present/verify", { payload, offline, verifier })
    }

    evalPolicy(
        credentialType: string,
        result: string,
        ageHours: number,
        verifier?: string,
    ): Promise<PolicyDecision> {
        return this.call("POST", "/policy/eval", {
            credential_type: credentialType,
            result,
            age_hours: ageHours,
            verifier,
        })
    }

    feed(user: string): Promise<{ events: Record<string, string>[] }> {
        return this.call("GET", `/push/feed/${encodeURIComponent(user)}`)
    }
}
