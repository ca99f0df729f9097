/**
 * Browser entry point: connects to the streaming server over WebSocket,
 * mirrors the server cut into a ResidentSet, and draws it on a canvas with
 * orbit controls and a HUD.
 */

import { attachOrbitControls, orbitPose, OrbitState } from "./camera.js";
import { Hud } from "./hud.js";
import { decodeStream, encodeCameraPose } from "./protocol.js";
import { PoseRateLimiter } from "./ratelimit.js";
import { renderSplats } from "./render.js";
import { ResidentSet } from "./replay.js";

export interface ViewerOptions {
  url?: string;
  focal?: [number, number];
  maxPosesPerSecond?: number;
}

export function startViewer(
  canvas: HTMLCanvasElement,
  hudEl: HTMLElement,
  opts: ViewerOptions = {},
): () => void {
  const url = opts.url ?? `ws://${location.host}/stream`;
  const focal = opts.focal ?? [Math.max(canvas.width, canvas.height), Math.max(canvas.width, canvas.height)];
  const resolution: [number, number] = [canvas.width, canvas.height];
  const ctx = canvas.getContext("2d");
  if (ctx === null) {
    throw new Error("2d canvas context unavailable");
  }

  const resident = new ResidentSet();
  const hud = new Hud(hudEl);
  const state: OrbitState = {
    target: [0, 0, 0],
    radius: 10,
    azimuth: 0.5,
    elevation: 0.3,
  };

  const ws = new WebSocket(url);
  ws.binaryType = "arraybuffer";
  const limiter = new PoseRateLimiter<Uint8Array>((bytes) => {
    if (ws.readyState === WebSocket.OPEN) {
      ws.send(bytes);
    }
  }, opts.maxPosesPerSecond ?? 30);

  let dirty = true;
  const pushPose = (): void => {
    dirty = true;
    limiter.submit(encodeCameraPose(orbitPose(state, focal, resolution)), performance.now());
  };

  ws.addEventListener("open", pushPose);
  ws.addEventListener("message", (ev: MessageEvent<ArrayBuffer>) => {
    for (const msg of decodeStream(new Uint8Array(ev.data))) {
      resident.apply(msg);
    }
    dirty = true;
  });

  const detachControls = attachOrbitControls(canvas, state, pushPose);

  let raf = 0;
  let lastFrameAt = performance.now();
  let fps = 0;
  const frame = (): void => {
    const now = performance.now();
    limiter.tick(now);
    if (dirty) {
      dirty = false;
      const drawn = renderSplats(ctx, resident.blocks(), orbitPose(state, focal, resolution));
      fps = 0.9 * fps + 0.1 * (1000 / Math.max(now - lastFrameAt, 1));
      hud.update(resident, fps, drawn);
    }
    lastFrameAt = now;
    raf = requestAnimationFrame(frame);
  };
  raf = requestAnimationFrame(frame);

  return () => {
    cancelAnimationFrame(raf);
    detachControls();
    ws.close();
  };
}
