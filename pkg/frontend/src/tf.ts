/** Transfer-function model mirrored from the backend: a piecewise-linear
 * opacity curve over four control points with pinned endpoints (0,0) and
 * (1,1). Edits are encoded as signed displacements of the two interior
 * points relative to the base TF declared by the server. */

import type { ControlPoint, TaskMeta } from "./types.js";

export interface BaseTf {
  c1: ControlPoint;
  c2: ControlPoint;
}

export function baseTfFromMeta(task: TaskMeta): BaseTf {
  const pts = task.base_tf?.control_points;
  if (!pts || pts.length !== 4) {
    throw new Error("server meta lacks a 4-point base transfer function");
  }
  return {
    c1: { scalar: pts[1][0], opacity: pts[1][1] },
    c2: { scalar: pts[2][0], opacity: pts[2][1] },
  };
}

/** Signed displacement vector (ds1, do1, ds2, do2) sent as p_vis. */
export function encodeDisplacement(base: BaseTf, c1: ControlPoint, c2: ControlPoint): number[] {
  return [
    c1.scalar - base.c1.scalar,
    c1.opacity - base.c1.opacity,
    c2.scalar - base.c2.scalar,
    c2.opacity - base.c2.opacity,
  ];
}

export function applyDisplacement(base: BaseTf, d: number[]): { c1: ControlPoint; c2: ControlPoint } {
  if (d.length !== 4) throw new Error("TF displacement must have 4 components");
  return {
    c1: { scalar: base.c1.scalar + d[0], opacity: clamp01(base.c1.opacity + d[1]) },
    c2: { scalar: base.c2.scalar + d[2], opacity: clamp01(base.c2.opacity + d[3]) },
  };
}

/** Piecewise-linear opacity at scalar value s; matches the backend sampling. */
export function opacityAt(c1: ControlPoint, c2: ControlPoint, s: number): number {
  const xs = [0, c1.scalar, c2.scalar, 1];
  const ys = [0, c1.opacity, c2.opacity, 1];
  const x = clamp01(s);
  for (let i = 1; i < xs.length; i++) {
    if (x <= xs[i]) {
      const t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
      return ys[i - 1] + t * (ys[i] - ys[i - 1]);
    }
  }
  return 1;
}

/** 256-entry discretization, sample i at s = i/255. */
export function sampleCurve(c1: ControlPoint, c2: ControlPoint, n = 256): number[] {
  const out = new Array<number>(n);
  for (let i = 0; i < n; i++) out[i] = opacityAt(c1, c2, i / (n - 1));
  return out;
}

export function clamp01(x: number): number {
  return Math.min(1, Math.max(0, x));
}

/** Clamp a dragged control point into its displacement bounds while keeping
 * c1.scalar < c2.scalar (swaps prevented by construction). */
export function clampControlPoint(
  base: BaseTf,
  which: "c1" | "c2",
  proposal: ControlPoint,
  bounds: Array<[number, number]>,
): ControlPoint {
  const [dsLo, dsHi] = which === "c1" ? bounds[0] : bounds[2];
  const [doLo, doHi] = which === "c1" ? bounds[1] : bounds[3];
  const b = which === "c1" ? base.c1 : base.c2;
  return {
    scalar: Math.min(b.scalar + dsHi, Math.max(b.scalar + dsLo, proposal.scalar)),
    opacity: Math.min(b.opacity + doHi, Math.max(b.opacity + doLo, proposal.opacity)),
  };
}
