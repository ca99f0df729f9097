/**
 * Cut-delta streaming protocol decoder.
 *
 * Framing: u8 message type, u32 little-endian payload length, payload.
 * Attribute payloads carry 23 f32 per Gaussian in structure-of-arrays order:
 * means (3), scales (3), rotations (4, wxyz), opacity (1), base color (3),
 * degree-1 SH rest (9).
 */

export const MSG_CAMERA_POSE = 1;
export const MSG_SPT_LOAD = 2;
export const MSG_SPT_EVICT = 3;
export const MSG_UPPER_SET = 4;
export const MSG_STATS = 5;

export const WIRE_FLOATS = 23;
export const WIRE_BYTES_PER_GAUSSIAN = 4 * WIRE_FLOATS;

const FRAME_HEADER_BYTES = 5;

export class ProtocolError extends Error {}

export interface SoaAttributes {
  count: number;
  means: Float32Array; // 3 per gaussian
  scales: Float32Array; // 3 per gaussian
  rotations: Float32Array; // 4 per gaussian, (w, x, y, z)
  opacities: Float32Array; // 1 per gaussian
  baseColors: Float32Array; // 3 per gaussian
  shRest: Float32Array; // 9 per gaussian
}

export interface CameraPose {
  position: [number, number, number];
  orientation: [number, number, number, number];
  focal: [number, number];
  resolution: [number, number];
}

export interface PoseMessage extends CameraPose {
  type: "camera_pose";
}

export interface SptLoadMessage {
  type: "spt_load";
  sptId: number;
  attrs: SoaAttributes;
}

export interface SptEvictMessage {
  type: "spt_evict";
  sptId: number;
}

export interface UpperSetMessage {
  type: "upper_set";
  attrs: SoaAttributes;
}

export interface StatsMessage {
  type: "stats";
  rendered: number;
  loaded: number;
  bytes: number;
  cutMs: number;
}

export type Message =
  | PoseMessage
  | SptLoadMessage
  | SptEvictMessage
  | UpperSetMessage
  | StatsMessage;

function floatSection(
  view: DataView,
  offset: number,
  count: number,
): Float32Array {
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    out[i] = view.getFloat32(offset + 4 * i, true);
  }
  return out;
}

function parseAttrs(view: DataView, offset: number, n: number): SoaAttributes {
  let at = offset;
  const section = (cols: number): Float32Array => {
    const arr = floatSection(view, at, cols * n);
    at += 4 * cols * n;
    return arr;
  };
  return {
    count: n,
    means: section(3),
    scales: section(3),
    rotations: section(4),
    opacities: section(1),
    baseColors: section(3),
    shRest: section(9),
  };
}

/** Decode one framed message at `offset`; returns the message and the offset
 * just past it. */
export function decodeMessage(
  buf: Uint8Array,
  offset = 0,
): { msg: Message; next: number } {
  if (buf.length - offset < FRAME_HEADER_BYTES) {
    throw new ProtocolError(`truncated frame header at byte ${offset}`);
  }
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  const msgType = view.getUint8(offset);
  const payloadLen = view.getUint32(offset + 1, true);
  const start = offset + FRAME_HEADER_BYTES;
  const next = start + payloadLen;
  if (buf.length < next) {
    throw new ProtocolError(`truncated payload at byte ${start}`);
  }
  switch (msgType) {
    case MSG_CAMERA_POSE: {
      if (payloadLen !== 44) {
        throw new ProtocolError(`camera pose payload is ${payloadLen} bytes`);
      }
      const f = floatSection(view, start, 9);
      return {
        msg: {
          type: "camera_pose",
          position: [f[0], f[1], f[2]],
          orientation: [f[3], f[4], f[5], f[6]],
          focal: [f[7], f[8]],
          resolution: [
            view.getUint32(start + 36, true),
            view.getUint32(start + 40, true),
          ],
        },
        next,
      };
    }
    case MSG_SPT_LOAD: {
      if (payloadLen < 8) {
        throw new ProtocolError(`spt load payload is ${payloadLen} bytes`);
      }
      const sptId = view.getUint32(start, true);
      const n = view.getUint32(start + 4, true);
      if (payloadLen !== 8 + n * WIRE_BYTES_PER_GAUSSIAN) {
        throw new ProtocolError(
          `spt load payload is ${payloadLen} bytes, expected ` +
            `${8 + n * WIRE_BYTES_PER_GAUSSIAN} for ${n} gaussians`,
        );
      }
      return { msg: { type: "spt_load", sptId, attrs: parseAttrs(view, start + 8, n) }, next };
    }
    case MSG_SPT_EVICT: {
      if (payloadLen !== 4) {
        throw new ProtocolError(`spt evict payload is ${payloadLen} bytes`);
      }
      return { msg: { type: "spt_evict", sptId: view.getUint32(start, true) }, next };
    }
    case MSG_UPPER_SET: {
      if (payloadLen < 4) {
        throw new ProtocolError(`upper set payload is ${payloadLen} bytes`);
      }
      const n = view.getUint32(start, true);
      if (payloadLen !== 4 + n * WIRE_BYTES_PER_GAUSSIAN) {
        throw new ProtocolError(
          `upper set payload is ${payloadLen} bytes, expected ` +
            `${4 + n * WIRE_BYTES_PER_GAUSSIAN} for ${n} gaussians`,
        );
      }
      return { msg: { type: "upper_set", attrs: parseAttrs(view, start + 4, n) }, next };
    }
    case MSG_STATS: {
      if (payloadLen !== 20) {
        throw new ProtocolError(`stats payload is ${payloadLen} bytes`);
      }
      return {
        msg: {
          type: "stats",
          rendered: view.getUint32(start, true),
          loaded: view.getUint32(start + 4, true),
          bytes: Number(view.getBigUint64(start + 8, true)),
          cutMs: view.getFloat32(start + 16, true),
        },
        next,
      };
    }
    default:
      throw new ProtocolError(`unknown message type ${msgType}`);
  }
}

/** Decode a whole buffer of concatenated messages. */
export function decodeStream(buf: Uint8Array): Message[] {
  const out: Message[] = [];
  let offset = 0;
  while (offset < buf.length) {
    const { msg, next } = decodeMessage(buf, offset);
    out.push(msg);
    offset = next;
  }
  return out;
}

/** Encode a client -> server camera pose message. */
export function encodeCameraPose(pose: CameraPose): Uint8Array {
  const buf = new Uint8Array(FRAME_HEADER_BYTES + 44);
  const view = new DataView(buf.buffer);
  view.setUint8(0, MSG_CAMERA_POSE);
  view.setUint32(1, 44, true);
  const floats = [...pose.position, ...pose.orientation, ...pose.focal];
  floats.forEach((v, i) => view.setFloat32(FRAME_HEADER_BYTES + 4 * i, v, true));
  view.setUint32(FRAME_HEADER_BYTES + 36, pose.resolution[0], true);
  view.setUint32(FRAME_HEADER_BYTES + 40, pose.resolution[1], true);
  return buf;
}
