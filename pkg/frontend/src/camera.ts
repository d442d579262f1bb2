// Orbit camera: spherical state around a target, emitting the row-major
// camera-to-world matrices the server consumes (right-handed, camera looks
// down its own -z, world up is +z).

export interface OrbitState {
  target: [number, number, number];
  radius: number;
  azimuth: number;
  elevation: number;
  minRadius: number;
  maxRadius: number;
}

export function defaultOrbit(): OrbitState {
  return {
    target: [0.5, 0.5, 0.5],
    radius: 2.0,
    azimuth: 0.0,
    elevation: 0.35,
    minRadius: 0.9,
    maxRadius: 6.0,
  };
}

export function rotate(state: OrbitState, dAzimuth: number, dElevation: number): void {
  state.azimuth = (state.azimuth + dAzimuth) % (2 * Math.PI);
  const limit = Math.PI / 2 - 0.05;
  state.elevation = Math.min(limit, Math.max(-limit, state.elevation + dElevation));
}

export function dolly(state: OrbitState, factor: number): void {
  state.radius = Math.min(state.maxRadius, Math.max(state.minRadius, state.radius * factor));
}

export function pan(state: OrbitState, dx: number, dy: number): void {
  state.target[0] += dx;
  state.target[2] += dy;
}

function normalize(v: number[]): number[] {
  const n = Math.hypot(v[0], v[1], v[2]);
  return [v[0] / n, v[1] / n, v[2] / n];
}

function cross(a: number[], b: number[]): number[] {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

export function eyePosition(state: OrbitState): [number, number, number] {
  const ce = Math.cos(state.elevation);
  return [
    state.target[0] + state.radius * ce * Math.cos(state.azimuth),
    state.target[1] + state.radius * ce * Math.sin(state.azimuth),
    state.target[2] + state.radius * Math.sin(state.elevation),
  ];
}

export function poseMatrix(state: OrbitState): Float32Array {
  const eye = eyePosition(state);
  const fwd = normalize([
    state.target[0] - eye[0],
    state.target[1] - eye[1],
    state.target[2] - eye[2],
  ]);
  let up = [0, 0, 1];
  let right = cross(fwd, up);
  if (Math.hypot(right[0], right[1], right[2]) < 1e-8) right = cross(fwd, [1, 0, 0]);
  right = normalize(right);
  const trueUp = cross(right, fwd);
  // columns: right, up, -forward, eye (row-major storage)
  const m = new Float32Array(16);
  m[0] = right[0]; m[1] = trueUp[0]; m[2] = -fwd[0]; m[3] = eye[0];
  m[4] = right[1]; m[5] = trueUp[1]; m[6] = -fwd[1]; m[7] = eye[1];
  m[8] = right[2]; m[9] = trueUp[2]; m[10] = -fwd[2]; m[11] = eye[2];
  m[12] = 0; m[13] = 0; m[14] = 0; m[15] = 1;
  return m;
}
