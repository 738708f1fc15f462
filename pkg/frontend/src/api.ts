/** Thin client over the render server's HTTP API. Stale responses are
 * discarded by sequence number: the viewer only ever shows the newest
 * completed request. */

import type { RenderRequest, ServerMeta } from "./types.js";

export class RenderClient {
  private seq = 0;
  private shown = 0;

  constructor(readonly baseUrl: string) {}

  async fetchMeta(): Promise<ServerMeta> {
    const resp = await fetch(`${this.baseUrl}/meta`);
    if (!resp.ok) throw new Error(`GET /meta failed: ${resp.status}`);
    return (await resp.json()) as ServerMeta;
  }

  /** POST /render; resolves with a blob (and clamp flag) or null when a
   * newer request superseded this one before it completed. */
  async render(req: RenderRequest): Promise<{ blob: Blob; clamped: boolean } | null> {
    const ticket = ++this.seq;
    const resp = await fetch(`${this.baseUrl}/render`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
    });
    if (!resp.ok) {
      throw new Error(`POST /render failed: ${resp.status}`);
    }
    const blob = await resp.blob();
    if (ticket < this.shown) return null; // a newer response already displayed
    this.shown = ticket;
    return { blob, clamped: resp.headers.get("X-Clamped") === "true" };
  }
}
