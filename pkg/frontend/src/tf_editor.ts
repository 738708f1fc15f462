/** Canvas widget for the opacity transfer function: a piecewise-linear
 * curve through four control points. The endpoints are pinned at (0,0)
 * and (1,1) and cannot be grabbed; the two interior points drag freely
 * within their displacement bounds. */

import { ExplorerState } from "./state.js";
import { sampleCurve } from "./tf.js";

const POINT_RADIUS = 6;

export class TfEditor {
  private readonly canvas: HTMLCanvasElement;
  private readonly ctx: CanvasRenderingContext2D;
  private dragging: "c1" | "c2" | null = null;

  constructor(
    container: HTMLElement,
    private readonly explorer: ExplorerState,
    private readonly onEdit: () => void,
  ) {
    this.canvas = document.createElement("canvas");
    this.canvas.width = 280;
    this.canvas.height = 140;
    this.canvas.className = "tf-editor";
    container.appendChild(this.canvas);
    const ctx = this.canvas.getContext("2d");
    if (!ctx) throw new Error("canvas 2d context unavailable");
    this.ctx = ctx;
    this.canvas.addEventListener("pointerdown", (e) => this.onDown(e));
    this.canvas.addEventListener("pointermove", (e) => this.onMove(e));
    window.addEventListener("pointerup", () => (this.dragging = null));
    this.draw();
  }

  private toPixel(scalar: number, opacity: number): [number, number] {
    return [scalar * this.canvas.width, (1 - opacity) * this.canvas.height];
  }

  private fromPixel(x: number, y: number): { scalar: number; opacity: number } {
    return {
      scalar: Math.min(1, Math.max(0, x / this.canvas.width)),
      opacity: Math.min(1, Math.max(0, 1 - y / this.canvas.height)),
    };
  }

  private hit(e: PointerEvent): "c1" | "c2" | null {
    const rect = this.canvas.getBoundingClientRect();
    const x = e.clientX - rect.left;
    const y = e.clientY - rect.top;
    for (const which of ["c1", "c2"] as const) {
      const p = this.explorer.state[which];
      const [px, py] = this.toPixel(p.scalar, p.opacity);
      if ((px - x) ** 2 + (py - y) ** 2 <= (POINT_RADIUS + 3) ** 2) return which;
    }
    return null;
  }

  private onDown(e: PointerEvent): void {
    this.dragging = this.hit(e);
    if (this.dragging) this.canvas.setPointerCapture(e.pointerId);
  }

  private onMove(e: PointerEvent): void {
    if (!this.dragging) return;
    const rect = this.canvas.getBoundingClientRect();
    const pos = this.fromPixel(e.clientX - rect.left, e.clientY - rect.top);
    this.explorer.dragControlPoint(this.dragging, pos);
    this.draw();
    this.onEdit();
  }

  draw(): void {
    const { width, height } = this.canvas;
    const ctx = this.ctx;
    ctx.clearRect(0, 0, width, height);
    ctx.fillStyle = "#141820";
    ctx.fillRect(0, 0, width, height);

    const { c1, c2 } = this.explorer.state;
    const samples = sampleCurve(c1, c2, 128);
    ctx.strokeStyle = "#6fc2ff";
    ctx.lineWidth = 2;
    ctx.beginPath();
    samples.forEach((o, i) => {
      const [x, y] = this.toPixel(i / (samples.length - 1), o);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();

    const points: Array<[number, number, boolean]> = [
      [0, 0, false],
      [c1.scalar, c1.opacity, true],
      [c2.scalar, c2.opacity, true],
      [1, 1, false],
    ];
    for (const [s, o, movable] of points) {
      const [x, y] = this.toPixel(s, o);
      ctx.beginPath();
      ctx.arc(x, y, POINT_RADIUS, 0, Math.PI * 2);
      ctx.fillStyle = movable ? "#ffd166" : "#555c66";
      ctx.fill();
    }
  }
}
