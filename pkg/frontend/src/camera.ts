/**
 * Orbit camera: spherical coordinates around a target point, converted to
 * the wire pose (position + wxyz quaternion; camera frame is x right,
 * y down, z forward).
 */

import type { CameraPose } from "./protocol.js";

export interface OrbitState {
  target: [number, number, number];
  radius: number;
  azimuth: number; // radians around +y
  elevation: number; // radians above the horizontal plane
}

function cross(a: number[], b: number[]): number[] {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(v: number[]): number[] {
  const n = Math.hypot(v[0], v[1], v[2]);
  return [v[0] / n, v[1] / n, v[2] / n];
}

/** wxyz quaternion from a camera-to-world rotation with columns
 * (right, down, forward). */
function basisToQuat(r: number[], d: number[], f: number[]): [number, number, number, number] {
  // column-major 3x3: m[col][row]
  const m = [r, d, f];
  const trace = m[0][0] + m[1][1] + m[2][2];
  let w: number, x: number, y: number, z: number;
  if (trace > 0) {
    const s = Math.sqrt(trace + 1) * 2;
    w = s / 4;
    x = (m[1][2] - m[2][1]) / s;
    y = (m[2][0] - m[0][2]) / s;
    z = (m[0][1] - m[1][0]) / s;
  } else if (m[0][0] > m[1][1] && m[0][0] > m[2][2]) {
    const s = Math.sqrt(1 + m[0][0] - m[1][1] - m[2][2]) * 2;
    w = (m[1][2] - m[2][1]) / s;
    x = s / 4;
    y = (m[1][0] + m[0][1]) / s;
    z = (m[2][0] + m[0][2]) / s;
  } else if (m[1][1] > m[2][2]) {
    const s = Math.sqrt(1 + m[1][1] - m[0][0] - m[2][2]) * 2;
    w = (m[2][0] - m[0][2]) / s;
    x = (m[1][0] + m[0][1]) / s;
    y = s / 4;
    z = (m[2][1] + m[1][2]) / s;
  } else {
    const s = Math.sqrt(1 + m[2][2] - m[0][0] - m[1][1]) * 2;
    w = (m[0][1] - m[1][0]) / s;
    x = (m[2][0] + m[0][2]) / s;
    y = (m[2][1] + m[1][2]) / s;
    z = s / 4;
  }
  const sign = w < 0 ? -1 : 1;
  const n = Math.hypot(w, x, y, z) * sign;
  return [w / n, x / n, y / n, z / n];
}

export function orbitPose(
  state: OrbitState,
  focal: [number, number],
  resolution: [number, number],
): CameraPose {
  const { target, radius, azimuth, elevation } = state;
  const cosE = Math.cos(elevation);
  const position: [number, number, number] = [
    target[0] + radius * cosE * Math.cos(azimuth),
    target[1] + radius * Math.sin(elevation),
    target[2] + radius * cosE * Math.sin(azimuth),
  ];
  const forward = normalize([
    target[0] - position[0],
    target[1] - position[1],
    target[2] - position[2],
  ]);
  let up = [0, 1, 0];
  if (Math.abs(forward[1]) > 0.99) {
    up = [1, 0, 0];
  }
  const right = normalize(cross(up, forward));
  const down = cross(forward, right); // y points down in camera space
  return {
    position,
    orientation: basisToQuat(right, down, forward),
    focal,
    resolution,
  };
}

export interface OrbitControlOptions {
  rotateSpeed?: number;
  zoomSpeed?: number;
  minRadius?: number;
  maxRadius?: number;
}

/** Attach mouse-drag rotation and wheel zoom to an element; `onChange`
 * fires after every state mutation. */
export function attachOrbitControls(
  el: HTMLElement,
  state: OrbitState,
  onChange: () => void,
  opts: OrbitControlOptions = {},
): () => void {
  const rotateSpeed = opts.rotateSpeed ?? 0.005;
  const zoomSpeed = opts.zoomSpeed ?? 1.1;
  const minRadius = opts.minRadius ?? 0.5;
  const maxRadius = opts.maxRadius ?? 1e4;
  let dragging = false;
  let lastX = 0;
  let lastY = 0;

  const onDown = (e: MouseEvent): void => {
    dragging = true;
    lastX = e.clientX;
    lastY = e.clientY;
  };
  const onUp = (): void => {
    dragging = false;
  };
  const onMove = (e: MouseEvent): void => {
    if (!dragging) {
      return;
    }
    state.azimuth += rotateSpeed * (e.clientX - lastX);
    const maxEl = Math.PI / 2 - 0.01;
    state.elevation = Math.min(
      maxEl,
      Math.max(-maxEl, state.elevation + rotateSpeed * (e.clientY - lastY)),
    );
    lastX = e.clientX;
    lastY = e.clientY;
    onChange();
  };
  const onWheel = (e: WheelEvent): void => {
    e.preventDefault();
    const factor = e.deltaY > 0 ? zoomSpeed : 1 / zoomSpeed;
    state.radius = Math.min(maxRadius, Math.max(minRadius, state.radius * factor));
    onChange();
  };

  el.addEventListener("mousedown", onDown);
  window.addEventListener("mouseup", onUp);
  window.addEventListener("mousemove", onMove);
  el.addEventListener("wheel", onWheel, { passive: false });
  return () => {
    el.removeEventListener("mousedown", onDown);
    window.removeEventListener("mouseup", onUp);
    window.removeEventListener("mousemove", onMove);
    el.removeEventListener("wheel", onWheel);
  };
}
