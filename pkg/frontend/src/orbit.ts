/**
 * Closed-form orbit camera.
 *
 * Conventions match the render service: +z is the camera forward axis,
 * pixel v grows downward, `rotation` is world-from-camera (row-major on the
 * wire) and `translation` is the camera center in world space.
 */

export interface PoseSpec {
  rotation: number[];     // 9 reals, row-major
  translation: number[];  // 3 reals
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
}

export interface OrbitParams {
  azimuth: number;    // radians around +z
  elevation: number;  // radians above the horizontal plane
  radius: number;
  lookAt: [number, number, number];
}

type Vec3 = [number, number, number];

const sub = (a: Vec3, b: Vec3): Vec3 => [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
const norm = (a: Vec3) => Math.hypot(a[0], a[1], a[2]);
const scale = (a: Vec3, s: number): Vec3 => [a[0] * s, a[1] * s, a[2] * s];
const cross = (a: Vec3, b: Vec3): Vec3 => [
  a[1] * b[2] - a[2] * b[1],
  a[2] * b[0] - a[0] * b[2],
  a[0] * b[1] - a[1] * b[0],
];

export function orbitToPose(params: OrbitParams, width: number, height: number,
                            fovDeg = 62.0): PoseSpec {
  const { azimuth, elevation, radius, lookAt } = params;
  const position: Vec3 = [
    lookAt[0] + radius * Math.cos(elevation) * Math.cos(azimuth),
    lookAt[1] + radius * Math.cos(elevation) * Math.sin(azimuth),
    lookAt[2] + radius * Math.sin(elevation),
  ];
  const fwd = scale(sub(lookAt, position), 1 / radius);
  let right = cross(fwd, [0, 0, 1]);
  const rn = norm(right);
  if (rn < 1e-9) {
    right = cross(fwd, [1, 0, 0]);
  }
  right = scale(right, 1 / norm(right));
  const down = cross(fwd, right);
  // world-from-camera columns are the camera axes (right, down, forward)
  const rotation = [
    right[0], down[0], fwd[0],
    right[1], down[1], fwd[1],
    right[2], down[2], fwd[2],
  ];
  const f = 0.5 * width / Math.tan((fovDeg * Math.PI) / 360.0);
  return {
    rotation,
    translation: [...position],
    fx: f, fy: f, cx: width / 2, cy: height / 2, width, height,
  };
}

/** Recover orbit parameters from a pose produced by orbitToPose. */
export function orbitFromPose(pose: PoseSpec, lookAt: [number, number, number]): OrbitParams {
  const p = pose.translation;
  const d: Vec3 = [p[0] - lookAt[0], p[1] - lookAt[1], p[2] - lookAt[2]];
  const radius = norm(d);
  const elevation = Math.asin(d[2] / radius);
  const azimuth = Math.atan2(d[1], d[0]);
  return { azimuth, elevation, radius, lookAt };
}

export function wrapAzimuth(a: number): number {
  const twoPi = 2 * Math.PI;
  return ((a % twoPi) + twoPi) % twoPi;
}
