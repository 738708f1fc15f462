import { beforeEach, describe, expect, it, vi } from "vitest";
import { ExplorerState } from "../src/state.js";
import { debounce } from "../src/debounce.js";
import type { ServerMeta } from "../src/types.js";

const meta: ServerMeta = {
  image: { width: 64, height: 64, focal: 60 },
  scene: { center: [0, 0, 0], half_extent: 1, orbit_radius: 3.2 },
  simulation: { names: ["wind", "mixing"], bounds: [[0, 1], [0.2, 0.8]] },
  tasks: {
    tf: {
      kind: "tf_displacement",
      bounds: [[-0.15, 0.15], [-0.3, 0.3], [-0.15, 0.15], [-0.3, 0.3]],
      base_tf: { control_points: [[0, 0], [1 / 3, 0.1], [2 / 3, 0.7], [1, 1]] },
    },
    isovalue: { kind: "isovalue", bounds: [[0.2, 0.6]] },
  },
  n_gaussians: 1234,
};

describe("explorer state", () => {
  let explorer: ExplorerState;
  beforeEach(() => {
    explorer = new ExplorerState(meta);
  });

  it("clamps simulation sliders to /meta bounds", () => {
    explorer.setSimParam(0, 1.7);
    explorer.setSimParam(1, -2);
    expect(explorer.state.pSim).toEqual([1, 0.2]);
    const req = explorer.renderRequest();
    req.p_sim.forEach((v, i) => {
      const [lo, hi] = meta.simulation.bounds[i];
      expect(v).toBeGreaterThanOrEqual(lo);
      expect(v).toBeLessThanOrEqual(hi);
    });
  });

  it("emits the documented TF gesture encoding (B1)", () => {
    explorer.setTask("tf");
    // raise c1 opacity by 0.05, leave everything else at base
    explorer.dragControlPoint("c1", { scalar: 1 / 3, opacity: 0.1 + 0.05 });
    const req = explorer.renderRequest();
    expect(req.task).toBe("tf");
    expect(req.p_vis).toHaveLength(4);
    expect(req.p_vis![0]).toBeCloseTo(0, 12);
    expect(req.p_vis![1]).toBeCloseTo(0.05, 12);
    expect(req.p_vis![2]).toBeCloseTo(0, 12);
    expect(req.p_vis![3]).toBeCloseTo(0, 12);
  });

  it("reset returns the zero displacement vector", () => {
    explorer.setTask("tf");
    explorer.dragControlPoint("c2", { scalar: 0.6, opacity: 0.9 });
    explorer.resetTf();
    expect(explorer.pVis()).toEqual([0, 0, 0, 0]);
  });

  it("keeps c1 left of c2 under adversarial drags", () => {
    explorer.setTask("tf");
    explorer.dragControlPoint("c1", { scalar: 0.99, opacity: 0.2 });
    explorer.dragControlPoint("c2", { scalar: 0.01, opacity: 0.9 });
    expect(explorer.state.c1.scalar).toBeLessThan(explorer.state.c2.scalar);
  });

  it("vertical drags change only the opacity coordinate", () => {
    explorer.setTask("tf");
    const before = explorer.state.c1.scalar;
    explorer.dragControlPoint("c1", { scalar: before, opacity: 0.33 });
    expect(explorer.state.c1.scalar).toBe(before);
    expect(explorer.state.c1.opacity).toBeCloseTo(0.33, 12);
  });

  it("isovalue slider obeys task bounds and fills p_vis", () => {
    explorer.setTask("isovalue");
    explorer.setIsovalue(0.05);
    expect(explorer.state.isovalue).toBe(0.2);
    explorer.setIsovalue(0.5);
    expect(explorer.renderRequest().p_vis).toEqual([0.5]);
  });

  it("rejects unknown tasks", () => {
    expect(() => explorer.setTask("nope")).toThrow();
  });

  it("simulation-only requests omit task fields", () => {
    const req = explorer.renderRequest();
    expect(req.task).toBeUndefined();
    expect(req.p_vis).toBeUndefined();
  });
});

describe("debounce", () => {
  it("fires once after the quiet window", () => {
    vi.useFakeTimers();
    const fn = vi.fn();
    const d = debounce(fn, 75);
    d();
    d();
    d();
    vi.advanceTimersByTime(74);
    expect(fn).not.toHaveBeenCalled();
    vi.advanceTimersByTime(2);
    expect(fn).toHaveBeenCalledTimes(1);
    vi.useRealTimers();
  });
});
