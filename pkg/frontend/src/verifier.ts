/** Verifier screen flow: paste/scan a payload, render the verdict card.
 *
 * The card model carries everything the screen shows: accept/reject
 * tone, the reject reason, disclosed claims, the ledger-check badge
 * (passed / skipped / failed), and the policy decision when the
 * disclosed claims allow evaluating one.
 */

import { PolicyDecision, VerifiedStatus, VerifierApi } from "./api.js"

export interface VerdictCard {
    tone: "accept" | "reject" | "error"
    reason: string | null
    claims: Record<string, string>
    credentialType: string | null
    mode: string | null
    ledgerBadge: "passed" | "skipped" | "failed"
    ledgerSkipped: boolean
    policy: PolicyDecision | null
    checkedAt: number
}

export class VerifierFlow {
    lastVerdicts: VerdictCard[] = []
    onChange: (card: VerdictCard) => void = () => {}

    constructor(
        private readonly api: VerifierApi,
        private readonly verifierName?: string,
        private readonly now: () => number = () => Math.floor(Date.now() / 1000),
    ) {}

    async verify(payload: string, offline = false): Promise<VerdictCard> {
        const trimmed = payload.trim()
        let card: VerdictCard
        if (!trimmed) {
            card = errorCard("Malformed", this.now())
        } else {
            try {
                const status = await this.api.verify(trimmed, offline, this.verifierName)
                card = await this.toCard(status)
            } catch (error) {
                card = errorCard(error instanceof Error ? error.message : String(error), this.now())
            }
        }
        this.lastVerdicts.unshift(card)
        this.onChange(card)
        return card
    }

    private async toCard(status: VerifiedStatus): Promise<VerdictCard> {
        const claims = status.claims ?? {}
        let policy: PolicyDecision | null = null
        if (status.outcome === "accept" && claims.kind && claims.result) {
            const effective = Number(claims.effective_at)
            const ageHours = Number.isFinite(effective)
                ? Math.max(0, (status.checked_at - effective) / 3600)
                : 0
            try {
                policy = await this.api.evalPolicy(
                    claims.kind, claims.result, ageHours, this.verifierName,
                )
            } catch {
                policy = null // verdict still renders without a policy result
            }
        }
        return {
            tone: status.outcome,
            reason: status.reason,
            claims,
            credentialType: status.credential_type,
            mode: status.mode,
            ledgerBadge: status.ledger_check,
            ledgerSkipped: status.ledger_check === "skipped",
            policy,
            checkedAt: status.checked_at,
        }
    }
}

function errorCard(reason: string, at: number): VerdictCard {
    return {
        tone: "error",
        reason,
        claims: {},
        credentialType: null,
        mode: null,
        ledgerBadge: "skipped",
        ledgerSkipped: true,
        policy: null,
        checkedAt: at,
    }
}
