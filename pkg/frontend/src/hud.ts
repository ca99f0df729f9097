/**
 * Heads-up display: streaming statistics and resident-set summary rendered
 * into a text overlay.
 */

import type { ResidentSet } from "./replay.js";

export function formatBytes(n: number): string {
  if (n >= 1 << 30) {
    return `${(n / (1 << 30)).toFixed(2)} GiB`;
  }
  if (n >= 1 << 20) {
    return `${(n / (1 << 20)).toFixed(1)} MiB`;
  }
  if (n >= 1024) {
    return `${(n / 1024).toFixed(1)} KiB`;
  }
  return `${n} B`;
}

export function hudText(resident: ResidentSet, fps: number, drawn: number): string {
  const counts = resident.residentCounts();
  const sptCount = Object.keys(counts.spts).length;
  const lines = [
    `fps ${fps.toFixed(0)}  drawn ${drawn}`,
    `resident ${resident.totalResident()} gaussians ` +
      `(upper ${counts.upper}, ${sptCount} spts)`,
  ];
  const stats = resident.lastStats;
  if (stats !== null) {
    lines.push(
      `server cut ${stats.rendered} / loaded ${stats.loaded} ` +
        `in ${stats.cutMs.toFixed(1)} ms, ${formatBytes(stats.bytes)} sent`,
    );
  }
  return lines.join("\n");
}

export class Hud {
  constructor(private readonly el: HTMLElement) {
    el.style.whiteSpace = "pre";
  }

  update(resident: ResidentSet, fps: number, drawn: number): void {
    this.el.textContent = hudText(resident, fps, drawn);
  }
}
