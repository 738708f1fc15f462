/** Wires the panels together: simulation sliders, orbit viewpoint control,
 * task switcher, TF editor / isovalue slider, and the render viewport.
 * Every interaction issues one debounced render request; the returned
 * image drives the next adjustment. */

import { RenderClient } from "./api.js";
import { debounce, RENDER_DEBOUNCE_MS } from "./debounce.js";
import { ExplorerState } from "./state.js";
import { TfEditor } from "./tf_editor.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, parent: HTMLElement, className?: string, text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  parent.appendChild(node);
  return node;
}

function slider(parent: HTMLElement, label: string, lo: number, hi: number,
                value: number, step: number, onInput: (v: number) => void): HTMLInputElement {
  const row = el("label", parent, "slider-row");
  el("span", row, "slider-label", label);
  const input = el("input", row);
  input.type = "range";
  input.min = String(lo);
  input.max = String(hi);
  input.step = String(step);
  input.value = String(value);
  const readout = el("span", row, "slider-value", value.toFixed(3));
  input.addEventListener("input", () => {
    const v = Number(input.value);
    readout.textContent = v.toFixed(3);
    onInput(v);
  });
  return input;
}

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app container");
  const serverUrl = (document.getElementById("server-url") as HTMLInputElement | null)?.value
    ?? window.location.origin;
  const client = new RenderClient(serverUrl);
  const meta = await client.fetchMeta();
  const explorer = new ExplorerState(meta);

  const controls = el("div", root, "controls");
  const viewport = el("div", root, "viewport");
  const img = el("img", viewport, "render-output");
  img.width = meta.image.width * 4;
  img.height = meta.image.height * 4;
  const status = el("div", viewport, "status", "");
  const pinButton = el("button", viewport, "pin-button", "pin for comparison");
  const pinned = el("img", viewport, "pinned-output");
  pinned.width = meta.image.width * 4;
  pinned.height = meta.image.height * 4;
  pinButton.addEventListener("click", () => {
    if (img.src) pinned.src = img.src;
  });

  let inFlight = false;
  const requestRender = debounce(async () => {
    inFlight = true;
    status.textContent = "rendering...";
    try {
      const result = await client.render(explorer.renderRequest());
      if (result) {
        img.src = URL.createObjectURL(result.blob);
        status.textContent = result.clamped ? "parameters clamped to bounds" : "";
      }
    } catch (err) {
      status.textContent = `render failed: ${err}`;
      status.classList.add("error");
    } finally {
      inFlight = false;
    }
  }, RENDER_DEBOUNCE_MS);

  // simulation parameters
  const simPanel = el("fieldset", controls, "panel");
  el("legend", simPanel, "", "simulation parameters");
  meta.simulation.names.forEach((name, i) => {
    const [lo, hi] = meta.simulation.bounds[i];
    slider(simPanel, name, lo, hi, explorer.state.pSim[i], (hi - lo) / 200, (v) => {
      explorer.setSimParam(i, v);
      requestRender();
    });
  });

  // viewpoint
  const viewPanel = el("fieldset", controls, "panel");
  el("legend", viewPanel, "", "viewpoint");
  slider(viewPanel, "azimuth", 0, 360, explorer.state.azimuth, 1, (v) => {
    explorer.setOrbit(v, explorer.state.elevation, explorer.state.radius);
    requestRender();
  });
  slider(viewPanel, "elevation", -89, 89, explorer.state.elevation, 1, (v) => {
    explorer.setOrbit(explorer.state.azimuth, v, explorer.state.radius);
    requestRender();
  });
  slider(viewPanel, "radius", 1, 8, explorer.state.radius, 0.05, (v) => {
    explorer.setOrbit(explorer.state.azimuth, explorer.state.elevation, v);
    requestRender();
  });

  // visualization tasks
  const visPanel = el("fieldset", controls, "panel");
  el("legend", visPanel, "", "visualization");
  const taskSelect = el("select", visPanel);
  for (const name of ["none", ...explorer.availableTasks()]) {
    const opt = el("option", taskSelect, "", name);
    opt.value = name;
  }
  const tfBox = el("div", visPanel, "task-box");
  const isoBox = el("div", visPanel, "task-box");

  if ("tf" in meta.tasks) {
    new TfEditor(tfBox, explorer, () => requestRender());
    const reset = el("button", tfBox, "", "reset to base TF");
    reset.addEventListener("click", () => {
      explorer.resetTf();
      tfBox.querySelector("canvas")?.dispatchEvent(new Event("redraw"));
      requestRender();
    });
  }
  if ("isovalue" in meta.tasks) {
    const [lo, hi] = meta.tasks["isovalue"].bounds[0];
    slider(isoBox, "isovalue", lo, hi, explorer.state.isovalue, (hi - lo) / 200, (v) => {
      explorer.setIsovalue(v);
      requestRender();
    });
  }

  const syncTaskBoxes = () => {
    tfBox.style.display = explorer.state.activeTask === "tf" ? "" : "none";
    isoBox.style.display = explorer.state.activeTask === "isovalue" ? "" : "none";
  };
  taskSelect.addEventListener("change", () => {
    explorer.setTask(taskSelect.value === "none" ? null : taskSelect.value);
    syncTaskBoxes();
    requestRender();
  });
  syncTaskBoxes();

  requestRender();
}

boot().catch((err) => {
  const root = document.getElementById("app");
  if (root) root.textContent = `failed to start: ${err}`;
});
