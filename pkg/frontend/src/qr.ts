/** Client-side QR rendering of the payload string. */

import QRCode from "qrcode"

export async function renderQr(canvas: HTMLCanvasElement, payload: string): Promise<void> {
    await QRCode.toCanvas(canvas, payload, { errorCorrectionLevel: "M", margin: 2, scale: 3 })
}
