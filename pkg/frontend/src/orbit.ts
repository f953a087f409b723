/**
 * Orbit camera: azimuth/elevation/distance around a target, producing the
 * row-major camera-to-world pose the service expects (right-handed,
 * camera +z forward, +y down in the image).
 */

export interface OrbitState {
  target: [number, number, number];
  azimuth: number; // radians
  elevation: number; // radians, positive looks down from above
  distance: number;
}

export function defaultOrbit(): OrbitState {
  return { target: [0.5, 0.5, 0.5], azimuth: 0.6, elevation: 0.35, distance: 2.3 };
}

function sub(a: number[], b: number[]): number[] {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: number[], b: number[]): number[] {
  return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
}

function norm(a: number[]): number {
  return Math.hypot(a[0], a[1], a[2]);
}

function unit(a: number[]): number[] {
  const n = norm(a);
  return [a[0] / n, a[1] / n, a[2] / n];
}

export function orbitEye(s: OrbitState): [number, number, number] {
  const ce = Math.cos(s.elevation);
  return [
    s.target[0] + s.distance * Math.cos(s.azimuth) * ce,
    s.target[1] + s.distance * Math.sin(s.azimuth) * ce,
    s.target[2] + s.distance * Math.sin(s.elevation),
  ];
}

/** Row-major 4x4 camera-to-world matrix for the current orbit state. */
export function orbitPose(s: OrbitState): number[] {
  const eye = orbitEye(s);
  let fwd = unit(sub(s.target, eye as unknown as number[]));
  let up = [0, 0, 1];
  let right = cross(fwd, up);
  if (norm(right) < 1e-12) {
    up = [0, 1, 0];
    right = cross(fwd, up);
  }
  right = unit(right);
  const down = cross(fwd, right); // +y in camera space points down
  return [
    right[0], down[0], fwd[0], eye[0],
    right[1], down[1], fwd[1], eye[1],
    right[2], down[2], fwd[2], eye[2],
    0, 0, 0, 1,
  ];
}

export function rotate(s: OrbitState, dAz: number, dEl: number): OrbitState {
  const lim = Math.PI / 2 - 0.01;
  return {
    ...s,
    azimuth: s.azimuth + dAz,
    elevation: Math.min(lim, Math.max(-lim, s.elevation + dEl)),
  };
}

export function zoom(s: OrbitState, factor: number): OrbitState {
  return { ...s, distance: Math.min(50, Math.max(0.05, s.distance * factor)) };
}

/** Translation+yaw+uniform-scale gizmo state -> row-major affine. */
export function gizmoAffine(
  tx: number, ty: number, tz: number, yawDeg: number, scale: number,
  center: [number, number, number] = [0.5, 0.5, 0.5],
): number[] {
  const a = (yawDeg * Math.PI) / 180;
  const c = Math.cos(a);
  const s = Math.sin(a);
  // rotate and scale about the tree center, then translate
  const rs = [
    [scale * c, -scale * s, 0],
    [scale * s, scale * c, 0],
    [0, 0, scale],
  ];
  const off = [
    center[0] - (rs[0][0] * center[0] + rs[0][1] * center[1]) + tx,
    center[1] - (rs[1][0] * center[0] + rs[1][1] * center[1]) + ty,
    center[2] - rs[2][2] * center[2] + tz,
  ];
  return [
    rs[0][0], rs[0][1], 0, off[0],
    rs[1][0], rs[1][1], 0, off[1],
    0, 0, rs[2][2], off[2],
    0, 0, 0, 1,
  ];
}
