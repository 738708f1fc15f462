/** UI state container: clamps every edit to the /meta bounds, builds render
 * request bodies, and never lets an out-of-bounds value escape to the
 * server. */

import { baseTfFromMeta, clampControlPoint, encodeDisplacement, type BaseTf } from "./tf.js";
import type { ControlPoint, RenderRequest, ServerMeta, UiState } from "./types.js";

export class ExplorerState {
  readonly meta: ServerMeta;
  readonly baseTf: BaseTf | null;
  state: UiState;

  constructor(meta: ServerMeta) {
    this.meta = meta;
    const tfTask = meta.tasks["tf"];
    this.baseTf = tfTask ? baseTfFromMeta(tfTask) : null;
    const mid = meta.simulation.bounds.map(([lo, hi]) => (lo + hi) / 2);
    const iso = meta.tasks["isovalue"];
    this.state = {
      pSim: mid,
      azimuth: 30,
      elevation: 20,
      radius: meta.scene.orbit_radius,
      activeTask: null,
      c1: this.baseTf ? { ...this.baseTf.c1 } : { scalar: 1 / 3, opacity: 0.1 },
      c2: this.baseTf ? { ...this.baseTf.c2 } : { scalar: 2 / 3, opacity: 0.7 },
      isovalue: iso ? (iso.bounds[0][0] + iso.bounds[0][1]) / 2 : 0.5,
    };
  }

  availableTasks(): string[] {
    return Object.keys(this.meta.tasks);
  }

  setSimParam(index: number, value: number): void {
    const [lo, hi] = this.meta.simulation.bounds[index];
    this.state.pSim[index] = Math.min(hi, Math.max(lo, value));
  }

  setOrbit(azimuth: number, elevation: number, radius: number): void {
    this.state.azimuth = ((azimuth % 360) + 360) % 360;
    this.state.elevation = Math.min(89, Math.max(-89, elevation));
    this.state.radius = Math.min(20, Math.max(0.5, radius));
  }

  setTask(task: string | null): void {
    if (task !== null && !(task in this.meta.tasks)) {
      throw new Error(`unknown task ${task}`);
    }
    this.state.activeTask = task;
  }

  setIsovalue(value: number): void {
    const iso = this.meta.tasks["isovalue"];
    if (!iso) return;
    const [lo, hi] = iso.bounds[0];
    this.state.isovalue = Math.min(hi, Math.max(lo, value));
  }

  /** Move an interior TF control point; ordering and bounds enforced. */
  dragControlPoint(which: "c1" | "c2", proposal: ControlPoint): void {
    const tf = this.meta.tasks["tf"];
    if (!tf || !this.baseTf) return;
    this.state[which] = clampControlPoint(this.baseTf, which, proposal, tf.bounds);
  }

  resetTf(): void {
    if (!this.baseTf) return;
    this.state.c1 = { ...this.baseTf.c1 };
    this.state.c2 = { ...this.baseTf.c2 };
  }

  /** Current p_vis vector for the active task, or undefined. */
  pVis(): number[] | undefined {
    if (this.state.activeTask === "tf" && this.baseTf) {
      return encodeDisplacement(this.baseTf, this.state.c1, this.state.c2);
    }
    if (this.state.activeTask === "isovalue") {
      return [this.state.isovalue];
    }
    return undefined;
  }

  renderRequest(): RenderRequest {
    const req: RenderRequest = {
      camera: {
        azimuth: this.state.azimuth,
        elevation: this.state.elevation,
        radius: this.state.radius,
      },
      p_sim: [...this.state.pSim],
    };
    if (this.state.activeTask) {
      req.task = this.state.activeTask;
      req.p_vis = this.pVis();
    }
    return req;
  }
}
