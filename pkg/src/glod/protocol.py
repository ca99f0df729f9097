"""Cut-delta streaming protocol: little-endian framed messages that keep a
remote client's resident splat set equal to the server-side view cut.

Framing: u8 msg_type, u32 payload_len, payload. Attribute payloads carry
23 f32 per Gaussian (means 3, scales 3, rotations 4, opacity 1, base color
3, degree-1 SH 9) in structure-of-arrays order, regardless of the stored
SH degree.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .core import AttributeArrays, Camera, LodConfig
from .hierarchy import Hierarchy
from .hspt import Hspt, cut_hspt

MSG_CAMERA_POSE = 1
MSG_SPT_LOAD = 2
MSG_SPT_EVICT = 3
MSG_UPPER_SET = 4
MSG_STATS = 5

_FRAME = struct.Struct("<BI")
_POSE = struct.Struct("<3f4f2f2I")
_STATS = struct.Struct("<IIQf")

WIRE_SH_COLS = 9
WIRE_FLOATS = 3 + 3 + 4 + 1 + 3 + WIRE_SH_COLS  # 23
WIRE_BYTES_PER_GAUSSIAN = 4 * WIRE_FLOATS


class ProtocolError(ValueError):
    pass


def _wire_attrs(attrs: AttributeArrays) -> bytes:
    """SoA payload clamped to degree-1 SH (pad or truncate to 9 columns)."""
    n = len(attrs)
    sh = np.zeros((n, WIRE_SH_COLS), dtype=np.float64)
    cols = min(attrs.sh_rest.shape[1], WIRE_SH_COLS)
    sh[:, :cols] = attrs.sh_rest[:, :cols]
    parts = [attrs.means, attrs.scales, attrs.rotations,
             attrs.opacities, attrs.base_colors, sh]
    return b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes()
                    for p in parts)


def _parse_wire_attrs(buf: bytes, n: int) -> AttributeArrays:
    if len(buf) != n * WIRE_BYTES_PER_GAUSSIAN:
        raise ProtocolError(
            f"attribute payload is {len(buf)} bytes, expected "
            f"{n * WIRE_BYTES_PER_GAUSSIAN} for {n} gaussians")
    out = AttributeArrays.zeros(n)
    off = 0
    for name, cols in [("means", 3), ("scales", 3), ("rotations", 4),
                       ("opacities", 1), ("base_colors", 3),
                       ("sh_rest", WIRE_SH_COLS)]:
        nbytes = 4 * cols * n
        arr = np.frombuffer(buf[off:off + nbytes], dtype="<f4").astype(np.float64)
        setattr(out, name, arr.reshape(n, cols) if cols > 1 else arr)
        off += nbytes
    return out


def frame(msg_type: int, payload: bytes) -> bytes:
    return _FRAME.pack(msg_type, len(payload)) + payload


def encode_camera_pose(cam: Camera) -> bytes:
    return frame(MSG_CAMERA_POSE, _POSE.pack(
        *np.asarray(cam.position, dtype=np.float32),
        *np.asarray(cam.orientation, dtype=np.float32),
        float(cam.focal[0]), float(cam.focal[1]),
        int(cam.resolution[0]), int(cam.resolution[1])))


def encode_spt_load(spt_id: int, attrs: AttributeArrays) -> bytes:
    payload = struct.pack("<II", spt_id, len(attrs)) + _wire_attrs(attrs)
    return frame(MSG_SPT_LOAD, payload)


def encode_spt_evict(spt_id: int) -> bytes:
    return frame(MSG_SPT_EVICT, struct.pack("<I", spt_id))


def encode_upper_set(attrs: AttributeArrays) -> bytes:
    payload = struct.pack("<I", len(attrs)) + _wire_attrs(attrs)
    return frame(MSG_UPPER_SET, payload)


def encode_stats(rendered: int, loaded: int, total_bytes: int,
                 cut_ms: float) -> bytes:
    return frame(MSG_STATS, _STATS.pack(rendered, loaded, total_bytes, cut_ms))


def decode_message(buf: bytes, offset: int = 0):
    """One message from buf at offset; returns (msg dict, next offset)."""
    if len(buf) - offset < _FRAME.size:
        raise ProtocolError(f"truncated frame header at byte {offset}")
    msg_type, plen = _FRAME.unpack_from(buf, offset)
    start = offset + _FRAME.size
    if len(buf) - start < plen:
        raise ProtocolError(f"truncated payload at byte {start}")
    payload = buf[start:start + plen]
    end = start + plen
    if msg_type == MSG_CAMERA_POSE:
        vals = _POSE.unpack(payload)
        msg = {"type": "camera_pose", "position": np.array(vals[0:3]),
               "orientation": np.array(vals[3:7]), "focal": vals[7:9],
               "resolution": vals[9:11]}
    elif msg_type == MSG_SPT_LOAD:
        spt_id, n = struct.unpack_from("<II", payload)
        msg = {"type": "spt_load", "spt_id": spt_id, "count": n,
               "attrs": _parse_wire_attrs(payload[8:], n)}
    elif msg_type == MSG_SPT_EVICT:
        msg = {"type": "spt_evict",
               "spt_id": struct.unpack("<I", payload)[0]}
    elif msg_type == MSG_UPPER_SET:
        n = struct.unpack_from("<I", payload)[0]
        msg = {"type": "upper_set", "count": n,
               "attrs": _parse_wire_attrs(payload[4:], n)}
    elif msg_type == MSG_STATS:
        rendered, loaded, total_bytes, cut_ms = _STATS.unpack(payload)
        msg = {"type": "stats", "rendered": rendered, "loaded": loaded,
               "bytes": total_bytes, "cut_ms": cut_ms}
    else:
        raise ProtocolError(f"unknown message type {msg_type} at byte {offset}")
    return msg, end


def decode_stream(buf: bytes) -> list:
    out = []
    off = 0
    while off < len(buf):
        msg, off = decode_message(buf, off)
        out.append(msg)
    return out


def pose_to_camera(msg: dict, near: float = 0.01) -> Camera:
    w, h = msg["resolution"]
    return Camera(position=msg["position"], orientation=msg["orientation"],
                  focal=tuple(msg["focal"]),
                  principal_point=(w / 2.0, h / 2.0),
                  resolution=(int(w), int(h)), near=near)


@dataclass
class ServeSession:
    """Server-side per-client state: diffs each pose's cut against what the
    client holds and emits the minimal delta (plus a Stats trailer)."""

    hierarchy: Hierarchy
    hspt: Hspt
    lod: LodConfig
    resident_spts: dict = field(default_factory=dict)  # spt_id -> node ids
    resident_upper: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.int64))
    bytes_sent: int = 0

    def handle_pose(self, cam: Camera) -> list:
        """Encoded reply messages for one camera pose."""
        t0 = time.perf_counter()
        rs = cut_hspt(self.hspt, self.hierarchy, cam, self.lod, cull=True)
        cut_ms = (time.perf_counter() - t0) * 1e3
        out = []
        loaded = 0
        new_spts = {s.spt_id: s.selected for s in rs.per_spt
                    if s.selected.size > 0}
        for spt_id in list(self.resident_spts):
            if spt_id not in new_spts:
                del self.resident_spts[spt_id]
                out.append(encode_spt_evict(spt_id))
        for spt_id, nodes in new_spts.items():
            have = self.resident_spts.get(spt_id)
            if have is not None and np.array_equal(have, nodes):
                continue
            out.append(encode_spt_load(
                spt_id, self.hierarchy.attrs.take(nodes)))
            self.resident_spts[spt_id] = nodes
            loaded += nodes.size
        upper = np.concatenate([rs.upper, rs.passthrough])
        if not np.array_equal(upper, self.resident_upper):
            out.append(encode_upper_set(self.hierarchy.attrs.take(upper)))
            self.resident_upper = upper
            loaded += upper.size
        self.bytes_sent += sum(len(m) for m in out)
        out.append(encode_stats(len(rs), loaded, self.bytes_sent, cut_ms))
        return out

    def resident_counts(self) -> dict:
        return {"upper": int(self.resident_upper.size),
                "spts": {int(k): int(v.size)
                         for k, v in self.resident_spts.items()}}


@dataclass
class ClientReplay:
    """Reference client: reconstructs the resident set from a message
    stream (the oracle the browser viewer is tested against)."""

    spts: dict = field(default_factory=dict)   # spt_id -> AttributeArrays
    upper: AttributeArrays | None = None
    unknown_evictions: int = 0
    stats_totals: dict = field(
        default_factory=lambda: {"rendered": 0, "loaded": 0})

    def apply(self, msg: dict):
        if msg["type"] == "spt_load":
            self.spts[msg["spt_id"]] = msg["attrs"]
        elif msg["type"] == "spt_evict":
            if msg["spt_id"] in self.spts:
                del self.spts[msg["spt_id"]]
            else:
                self.unknown_evictions += 1
        elif msg["type"] == "upper_set":
            self.upper = msg["attrs"]
        elif msg["type"] == "stats":
            self.stats_totals["rendered"] += msg["rendered"]
            self.stats_totals["loaded"] += msg["loaded"]

    def resident_counts(self) -> dict:
        return {"upper": 0 if self.upper is None else len(self.upper),
                "spts": {int(k): len(v) for k, v in self.spts.items()}}
