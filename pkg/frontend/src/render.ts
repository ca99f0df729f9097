/**
 * Canvas splat preview: projects each resident Gaussian with the pinhole
 * model and paints depth-sorted translucent ellipses back-to-front.
 * This is a navigation aid, not a faithful reproduction of the training
 * renderer's compositing.
 */

import type { CameraPose, SoaAttributes } from "./protocol.js";

interface Splat {
  x: number;
  y: number;
  rx: number;
  ry: number;
  angle: number;
  depth: number;
  color: string;
  alpha: number;
}

function quatToMat(q: [number, number, number, number]): number[][] {
  const [w, x, y, z] = q;
  return [
    [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
  ];
}

function projectBlock(
  attrs: SoaAttributes,
  pose: CameraPose,
  out: Splat[],
): void {
  const rot = quatToMat(pose.orientation); // camera -> world
  const [fx, fy] = pose.focal;
  const [w, h] = pose.resolution;
  const cx = w / 2;
  const cy = h / 2;
  for (let i = 0; i < attrs.count; i++) {
    const dx = attrs.means[3 * i] - pose.position[0];
    const dy = attrs.means[3 * i + 1] - pose.position[1];
    const dz = attrs.means[3 * i + 2] - pose.position[2];
    // world -> camera is the transpose of rot
    const tx = rot[0][0] * dx + rot[1][0] * dy + rot[2][0] * dz;
    const ty = rot[0][1] * dx + rot[1][1] * dy + rot[2][1] * dz;
    const tz = rot[0][2] * dx + rot[1][2] * dy + rot[2][2] * dz;
    if (tz <= 0.01) {
      continue;
    }
    const px = (fx * tx) / tz + cx;
    const py = (fy * ty) / tz + cy;
    if (px < -50 || px > w + 50 || py < -50 || py > h + 50) {
      continue;
    }
    const sMax = Math.max(attrs.scales[3 * i], attrs.scales[3 * i + 1], attrs.scales[3 * i + 2]);
    const sMin = Math.min(attrs.scales[3 * i], attrs.scales[3 * i + 1], attrs.scales[3 * i + 2]);
    const r = Math.round(255 * Math.min(Math.max(attrs.baseColors[3 * i], 0), 1));
    const g = Math.round(255 * Math.min(Math.max(attrs.baseColors[3 * i + 1], 0), 1));
    const b = Math.round(255 * Math.min(Math.max(attrs.baseColors[3 * i + 2], 0), 1));
    out.push({
      x: px,
      y: py,
      rx: Math.max(0.5, (fx * sMax) / tz),
      ry: Math.max(0.5, (fy * sMin) / tz),
      angle: 0,
      depth: tz,
      color: `rgb(${r},${g},${b})`,
      alpha: Math.min(Math.max(attrs.opacities[i], 0.02), 1),
    });
  }
}

export function renderSplats(
  ctx: CanvasRenderingContext2D,
  blocks: SoaAttributes[],
  pose: CameraPose,
): number {
  const [w, h] = pose.resolution;
  ctx.fillStyle = "#000";
  ctx.fillRect(0, 0, w, h);
  const splats: Splat[] = [];
  for (const block of blocks) {
    projectBlock(block, pose, splats);
  }
  splats.sort((a, b) => b.depth - a.depth); // painter's order
  for (const s of splats) {
    ctx.globalAlpha = s.alpha;
    ctx.fillStyle = s.color;
    ctx.beginPath();
    ctx.ellipse(s.x, s.y, s.rx, s.ry, s.angle, 0, 2 * Math.PI);
    ctx.fill();
  }
  ctx.globalAlpha = 1;
  return splats.length;
}
