/** Wire types mirroring the edit service's JSON fragments. */

export interface InstanceDoc {
  name: string;
  voct: string | null;
  affine: number[]; // 16, row-major
  timemap: string;
  visible: boolean;
  yaw_rate: number;
  frames?: number;
  effective_yaw?: number;
}

export interface LightDoc {
  kind: string;
  position: number[];
  ground_plane: number[];
  shadow_resolution: number;
  blur_sigma: number;
  shadow_strength: number;
  falloff_r0: number;
  falloff_min_scale: number;
  cast_shadows: boolean;
  falloff_enabled: boolean;
}

export interface ClockDoc {
  playing: boolean;
  frame: number;
  speed: number;
}

export interface SceneDoc {
  version: number;
  background: { type: string; rgb: number[] };
  frame_range: [number, number];
  instances: InstanceDoc[];
  lights: LightDoc[];
  clock?: ClockDoc;
  memory?: Record<string, number>;
}

export interface SceneState {
  revision: number;
  scene: SceneDoc;
}

export interface ServiceError {
  code: string;
  field: string;
  message: string;
}

export interface FrameHeader {
  revision: number;
  frame: number;
  camera_hash: string;
  w: number;
  h: number;
  encoding: string;
}

export interface PoseMessage {
  type: "pose";
  pose: number[];
  w: number;
  h: number;
  fx?: number;
  fy?: number;
  encoding?: string;
}
