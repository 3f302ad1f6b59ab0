/** DOM wiring for the holder and verifier screens. */

import { ApiClient } from "./api.js"
import { HolderFlow, PresentationRequest } from "./holder.js"
import { renderQr } from "./qr.js"
import { VerifierFlow } from "./verifier.js"

const IDENTITY_CLAIMS = new Set(["full_name", "date_of_birth", "document_number", "address"])

function el<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id)
    if (!node) throw new Error(`missing element #${id}`)
    return node as T
}

function serverUrl(): string {
    return (el<HTMLInputElement>("server-url").value || "http://127.0.0.1:8000").replace(/\/$/, "")
}

function setup(): void {
    let api = new ApiClient(serverUrl())
    let holder = new HolderFlow(api)
    let verifier = new VerifierFlow(api, "web-verifier")

    el<HTMLInputElement>("server-url").addEventListener("change", () => {
        api = new ApiClient(serverUrl())
        holder = attachHolder(new HolderFlow(api))
        verifier = attachVerifier(new VerifierFlow(api, "web-verifier"))
    })

    // -- role switch ---------------------------------------------------------

    for (const role of ["holder", "verifier"] as const) {
        el(`tab-${role}`).addEventListener("click", () => {
            el("holder-panel").hidden = role !== "holder"
            el("verifier-panel").hidden = role !== "verifier"
            el("tab-holder").classList.toggle("active", role === "holder")
            el("tab-verifier").classList.toggle("active", role === "verifier")
        })
    }

    // -- holder ----------------------------------------------------------------

    const attachHolder = (flow: HolderFlow): HolderFlow => {
        flow.onChange = (state) => renderHolder(flow, state)
        return flow
    }

    const renderHolder = (flow: HolderFlow, state: HolderFlow["state"]): void => {
        el("holder-locked").hidden = state.phase !== "locked"
        el("holder-select").hidden = state.phase !== "selecting"
        el("holder-consent").hidden = state.phase !== "consent"
        el("holder-qr").hidden = state.phase !== "presenting"
        el("unlock-error").textContent = state.phase === "locked" ? (state.message ?? "") : ""

        if (state.phase === "selecting") {
            const list = el("credential-list")
            list.innerHTML = ""
            for (const credential of state.credentials) {
                const row = document.createElement("div")
                row.className = "credential"
                const title = document.createElement("strong")
                title.textContent = credential.credential_type
                row.appendChild(title)
                const claims = document.createElement("div")
                claims.className = "claims"
                for (const name of credential.claims) {
                    const label = document.createElement("label")
                    const box = document.createElement("input")
                    box.type = "checkbox"
                    box.value = name
                    box.dataset.credential = credential.id
                    label.appendChild(box)
                    label.appendChild(document.createTextNode(name))
                    claims.appendChild(label)
                }
                row.appendChild(claims)
                const button = document.createElement("button")
                button.textContent = "Present"
                button.addEventListener("click", () => {
                    const anonymous = el<HTMLInputElement>("mode-anonymous").checked
                    const picked = Array.from(
                        claims.querySelectorAll<HTMLInputElement>("input:checked"),
                    ).map((b) => b.value)
                    const reveal = anonymous
                        ? picked.filter((n) => !IDENTITY_CLAIMS.has(n))
                        : picked
                    flow.requestPresentation({
                        credential,
                        mode: anonymous ? "deidentified" : "identified",
                        reveal,
                        kind: el<HTMLInputElement>("kind-static").checked ? "static" : "dynamic",
                    } satisfies PresentationRequest)
                })
                row.appendChild(button)
                list.appendChild(row)
            }
        }

        if (state.phase === "consent") {
            el("consent-mode").textContent =
                state.request.mode === "deidentified" ? "anonymous" : "identified"
            const list = el("consent-claims")
            list.innerHTML = ""
            const names = flow.consentClaims()
            if (names.length === 0) {
                const item = document.createElement("li")
                item.textContent = `(nothing - proves only a valid ${state.request.credential.credential_type} credential)`
                list.appendChild(item)
            }
            for (const name of names) {
                const item = document.createElement("li")
                item.textContent = name
                list.appendChild(item)
            }
        }

        if (state.phase === "presenting") {
            el("qr-countdown").textContent = `${state.secondsLeft}s`
            el("qr-payload").textContent = state.payload
            void renderQr(el<HTMLCanvasElement>("qr-canvas"), state.payload)
        }
    }

    attachHolder(holder)

    el("unlock-button").addEventListener("click", () => {
        void holder
            .unlock(
                el<HTMLInputElement>("wallet-name").value,
                el<HTMLInputElement>("wallet-passphrase").value,
            )
            .catch(() => {})
    })
    el("consent-accept").addEventListener("click", () => void holder.confirmConsent())
    el("consent-decline").addEventListener("click", () => holder.declineConsent())
    el("qr-done").addEventListener("click", () => holder.backToSelection())
    el("holder-logout").addEventListener("click", () => holder.logout())
    el("feed-refresh").addEventListener("click", () => {
        if (!holder.did) return
        void api.feed(holder.did).then((feed) => {
            const list = el("feed-list")
            list.innerHTML = ""
            for (const event of feed.events) {
                const item = document.createElement("li")
                item.textContent = JSON.stringify(event)
                list.appendChild(item)
            }
        })
    })

    // -- verifier ---------------------------------------------------------------

    const attachVerifier = (flow: VerifierFlow): VerifierFlow => {
        flow.onChange = (card) => {
            const node = document.createElement("div")
            node.className = `verdict ${card.tone}`
            const headline = document.createElement("h3")
            headline.textContent =
                card.tone === "accept" ? "ACCEPTED" : `REJECTED: ${card.reason ?? "error"}`
            node.appendChild(headline)
            if (card.ledgerSkipped) {
                const badge = document.createElement("span")
                badge.className = "badge"
                badge.textContent = "ledger check skipped"
                node.appendChild(badge)
            } else {
                const badge = document.createElement("span")
                badge.className = "badge"
                badge.textContent = `ledger ${card.ledgerBadge}`
                node.appendChild(badge)
            }
            const table = document.createElement("table")
            for (const [name, value] of Object.entries(card.claims)) {
                const row = table.insertRow()
                row.insertCell().textContent = name
                row.insertCell().textContent = value
            }
            node.appendChild(table)
            if (card.policy) {
                const policy = document.createElement("p")
                policy.textContent = card.policy.allow
                    ? "policy: allow"
                    : `policy: deny (${card.policy.reason})`
                node.appendChild(policy)
            }
            const output = el("verdicts")
            output.insertBefore(node, output.firstChild)
        }
        return flow
    }

    attachVerifier(verifier)

    el("verify-button").addEventListener("click", () => {
        void verifier.verify(
            el<HTMLTextAreaElement>("payload-input").value,
            el<HTMLInputElement>("verify-offline").checked,
        )
    })
}

window.addEventListener("load", setup)
