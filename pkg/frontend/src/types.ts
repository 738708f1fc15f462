/** Descriptors served by GET /meta. */
export interface ServerMeta {
  image: { width: number; height: number; focal: number };
  scene: { center: number[]; half_extent: number; orbit_radius: number };
  simulation: { names: string[]; bounds: Array<[number, number]> };
  tasks: Record<string, TaskMeta>;
  n_gaussians: number;
}

export interface TaskMeta {
  bounds: Array<[number, number]>;
  kind: string;
  base_tf?: { control_points: Array<[number, number]> };
}

/** One movable transfer-function control point in value/opacity space. */
export interface ControlPoint {
  scalar: number;
  opacity: number;
}

/** Body of POST /render. */
export interface RenderRequest {
  camera: { azimuth: number; elevation: number; radius: number };
  p_sim: number[];
  task?: string;
  p_vis?: number[];
}

/** Everything the panels edit; one render request per change. */
export interface UiState {
  pSim: number[];
  azimuth: number;
  elevation: number;
  radius: number;
  /** null = simulation-only rendering through the first deformation stage */
  activeTask: string | null;
  c1: ControlPoint;
  c2: ControlPoint;
  isovalue: number;
}
