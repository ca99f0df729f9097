"""Out-of-core scene storage.

Bit-exact little-endian scene file: header, 64-byte-aligned structure-of-
arrays attribute sections in *slot* order (each SPT's records contiguous so
a cut prefix is one contiguous read per attribute array), topology keyed by
node id, the SPT directory and packed records.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import AttributeArrays, EmptySceneError, LodConfig
from .hierarchy import NONE, Hierarchy
from .hspt import Hspt
from .spt import RECORD_DTYPE, Spt

MAGIC = b"GLOD"
VERSION = 1
ALIGN = 64
U32_NONE = 0xFFFFFFFF

SPT_DIR_DTYPE = np.dtype([
    ("spt_id", "<u4"), ("root", "<u4"),
    ("root_center", "<f4", (3,)),
    ("record_offset", "<u8"), ("record_count", "<u4"),
])

META_DTYPE = np.dtype([
    ("root", "<u4"), ("size_threshold", "<f8"), ("min_subtree", "<u4"),
    ("lod_threshold", "<f8"), ("lod_metric", "<u1"),
])

_HEADER = struct.Struct("<4sIQQB3xII4x")  # 40 bytes
_SECTION = struct.Struct("<16sQQ")        # 32 bytes


class CorruptFileError(ValueError):
    pass


class NotFoundError(KeyError):
    pass


class InvalidBlockError(ValueError):
    pass


class MemoryBacking:
    """In-memory byte store with the same instrumented interface as a file."""

    def __init__(self, data: bytes = b""):
        self.buf = bytearray(data)
        self.bytes_read = 0
        self.trace: list = []

    @property
    def size(self) -> int:
        return len(self.buf)

    def read(self, offset: int, n: int) -> bytes:
        if offset + n > len(self.buf):
            raise CorruptFileError(f"truncated read at byte {offset}")
        self.bytes_read += n
        self.trace.append((offset, n))
        return bytes(self.buf[offset:offset + n])

    def write(self, offset: int, data: bytes):
        end = offset + len(data)
        if end > len(self.buf):
            self.buf.extend(b"\x00" * (end - len(self.buf)))
        self.buf[offset:end] = data

    def tobytes(self) -> bytes:
        return bytes(self.buf)

    def close(self):
        pass


class FileBacking:
    """Demand-paged file access with byte/offset instrumentation."""

    def __init__(self, path, mode="r+b"):
        self.path = path
        self.f = open(path, mode)
        self.bytes_read = 0
        self.trace: list = []

    @property
    def size(self) -> int:
        self.f.seek(0, 2)
        return self.f.tell()

    def read(self, offset: int, n: int) -> bytes:
        self.f.seek(offset)
        data = self.f.read(n)
        if len(data) != n:
            raise CorruptFileError(f"truncated read at byte {offset}")
        self.bytes_read += n
        self.trace.append((offset, n))
        return data

    def write(self, offset: int, data: bytes):
        self.f.seek(offset)
        self.f.write(data)

    def close(self):
        self.f.close()


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _attr_specs(sh_cols: int):
    """(section name, columns) for each attribute array, canonical order."""
    return [("means", 3), ("scales", 3), ("rotations", 4), ("opacities", 1),
            ("base_colors", 3), ("sh_rest", sh_cols)]


def attribute_bytes_per_gaussian(sh_degree: int) -> int:
    sh_cols = 3 * ((sh_degree + 1) ** 2 - 1)
    return 4 * sum(c for _, c in _attr_specs(sh_cols))


@dataclass
class AttributeBlock:
    """Gathered attributes for an SPT record-prefix, in record order."""

    spt_id: int
    prefix_len: int
    attrs: AttributeArrays

    def __post_init__(self):
        if len(self.attrs) != self.prefix_len:
            raise InvalidBlockError("block arrays do not match prefix_len")


def _slot_order(h: Hierarchy, hspt: Hspt) -> np.ndarray:
    """slot -> node id; non-SPT nodes first (ascending id), then each SPT's
    records in record order."""
    in_spt = np.zeros(h.capacity, dtype=bool)
    for spt in hspt.spts:
        in_spt[spt.nodes] = True
    alive = np.ones(h.capacity, dtype=bool)
    if h.free:
        alive[np.asarray(h.free, dtype=np.int64)] = False
    head = np.nonzero(alive & ~in_spt)[0]
    parts = [head] + [spt.nodes for spt in hspt.spts]
    return np.concatenate(parts).astype(np.int64)


def write_scene(h: Hierarchy, hspt: Hspt, target) -> None:
    """Serialize hierarchy + HSPT. `target` is a path or a MemoryBacking."""
    if h.node_count == 0:
        raise EmptySceneError("refusing to write an empty scene")
    slot_to_node = _slot_order(h, hspt)
    nslots = slot_to_node.size
    node_to_slot = np.full(h.capacity, U32_NONE, dtype=np.uint32)
    node_to_slot[slot_to_node] = np.arange(nslots, dtype=np.uint32)

    sh_cols = h.attrs.sh_rest.shape[1]
    sh_degree = h.attrs.sh_degree
    sections = []
    for name, cols in _attr_specs(sh_cols):
        arr = getattr(h.attrs, name)[slot_to_node].astype("<f4")
        sections.append((name, arr.tobytes()))

    parent = h.parent.astype(np.int64).copy()
    parent_u = np.where(parent == NONE, U32_NONE, parent).astype("<u4")
    children_u = np.where(h.children.astype(np.int64) == NONE, U32_NONE,
                          h.children).astype("<u4")
    sections.append(("parents", parent_u.tobytes()))
    sections.append(("children", children_u.tobytes()))
    sections.append(("slot_to_node", slot_to_node.astype("<u4").tobytes()))
    sections.append(("node_to_slot", node_to_slot.tobytes()))
    sections.append(("upper_nodes", hspt.upper_nodes.astype("<u4").tobytes()))
    sections.append(("pass_roots", hspt.passthrough_roots.astype("<u4").tobytes()))

    sdir = np.zeros(len(hspt.spts), dtype=SPT_DIR_DTYPE)
    records = []
    rec_off = 0
    for i, spt in enumerate(hspt.spts):
        sdir[i]["spt_id"] = i
        sdir[i]["root"] = spt.root
        sdir[i]["root_center"] = spt.root_center.astype(np.float32)
        sdir[i]["record_offset"] = rec_off
        sdir[i]["record_count"] = spt.subtree_size
        records.append(spt.packed())
        rec_off += spt.subtree_size
    rec_arr = (np.concatenate(records) if records
               else np.empty(0, dtype=RECORD_DTYPE))
    sections.append(("spt_dir", sdir.tobytes()))
    sections.append(("spt_records", rec_arr.tobytes()))

    meta = np.zeros(1, dtype=META_DTYPE)
    meta[0]["root"] = h.root
    meta[0]["size_threshold"] = hspt.size_threshold
    meta[0]["min_subtree"] = hspt.min_subtree
    meta[0]["lod_threshold"] = hspt.lod.threshold
    meta[0]["lod_metric"] = 0 if hspt.lod.metric == "max_scale" else 1
    sections.append(("meta", meta.tobytes()))

    table_at = _HEADER.size
    payload_at = _align(table_at + _SECTION.size * len(sections))
    offsets = []
    cursor = payload_at
    for _, data in sections:
        offsets.append(cursor)
        cursor = _align(cursor + len(data))

    backing = target if isinstance(target, MemoryBacking) else None
    if backing is None:
        open(target, "wb").close()
        backing = FileBacking(target)
    try:
        header = _HEADER.pack(MAGIC, VERSION, h.leaf_count, h.node_count,
                              sh_degree, 0, len(sections))
        backing.write(0, header)
        for i, (name, data) in enumerate(sections):
            entry = _SECTION.pack(name.encode().ljust(16, b"\x00"),
                                  offsets[i], len(data))
            backing.write(table_at + i * _SECTION.size, entry)
            backing.write(offsets[i], data)
        end = _align(cursor)
        if backing.size < end:
            backing.write(end - 1, b"\x00")
    finally:
        if not isinstance(target, MemoryBacking):
            backing.close()


class Scene:
    """Open scene handle: demand-paged attribute reads aligned to SPT record
    prefixes, write-back of trained attributes, memory accounting."""

    def __init__(self, backing):
        self.backing = backing
        self._parse()

    def _parse(self):
        raw = self.backing.read(0, _HEADER.size)
        magic, version, gcount, ncount, sh_degree, _, nsect = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise CorruptFileError("bad magic at byte 0")
        if version != VERSION:
            raise CorruptFileError(f"unsupported version {version} at byte 4")
        self.gaussian_count = gcount
        self.node_count = ncount
        self.sh_degree = sh_degree
        self.sh_cols = 3 * ((sh_degree + 1) ** 2 - 1)
        self.sections = {}
        for i in range(nsect):
            at = _HEADER.size + i * _SECTION.size
            name, off, length = _SECTION.unpack(self.backing.read(at, _SECTION.size))
            if off % ALIGN:
                raise CorruptFileError(f"section misaligned at byte {at}")
            self.sections[name.rstrip(b"\x00").decode()] = (off, length)
        meta_off, meta_len = self._section("meta")
        meta = np.frombuffer(self.backing.read(meta_off, meta_len),
                             dtype=META_DTYPE)[0]
        self.root = int(meta["root"])
        self.size_threshold = float(meta["size_threshold"])
        self.min_subtree = int(meta["min_subtree"])
        self.lod = LodConfig(threshold=float(meta["lod_threshold"]),
                             metric="max_scale" if meta["lod_metric"] == 0
                             else "surface_area")
        off, length = self._section("spt_dir")
        self.spt_dir = np.frombuffer(self.backing.read(off, length),
                                     dtype=SPT_DIR_DTYPE)
        off, length = self._section("slot_to_node")
        self.slot_to_node = np.frombuffer(self.backing.read(off, length),
                                          dtype="<u4").astype(np.int64)
        self.nslots = self.slot_to_node.size
        self.attribute_bytes_read = 0
        # not instrumented: header/topology metadata reads above

    def _section(self, name):
        if name not in self.sections:
            raise CorruptFileError(f"missing section {name!r}")
        return self.sections[name]

    def _attr_specs(self):
        return _attr_specs(self.sh_cols)

    @property
    def bytes_per_gaussian(self) -> int:
        return attribute_bytes_per_gaussian(self.sh_degree)

    def _spt_entry(self, spt_id: int):
        if spt_id < 0 or spt_id >= self.spt_dir.size:
            raise NotFoundError(f"unknown spt_id {spt_id}")
        return self.spt_dir[spt_id]

    def spt_slot_start(self, spt_id: int) -> int:
        entry = self._spt_entry(spt_id)
        return self.nslots - int(self.spt_dir["record_count"].sum()) \
            + int(entry["record_offset"])

    def _read_slots(self, start: int, count: int) -> AttributeArrays:
        arrays = {}
        for name, cols in self._attr_specs():
            off, length = self._section(name)
            data = self.backing.read(off + 4 * cols * start, 4 * cols * count)
            arr = np.frombuffer(data, dtype="<f4")
            arrays[name] = arr.reshape(count, cols) if cols > 1 else arr
            self.attribute_bytes_read += len(data)
        return AttributeArrays(**arrays)

    def load_spt_prefix(self, spt_id: int, prefix_len: int) -> AttributeBlock:
        entry = self._spt_entry(spt_id)
        if prefix_len > int(entry["record_count"]):
            raise InvalidBlockError(
                f"prefix {prefix_len} exceeds record count {entry['record_count']}")
        start = self.spt_slot_start(spt_id)
        attrs = self._read_slots(start, int(prefix_len))
        return AttributeBlock(spt_id=spt_id, prefix_len=int(prefix_len), attrs=attrs)

    def write_back(self, block: AttributeBlock) -> None:
        entry = self._spt_entry(block.spt_id)
        if block.prefix_len > int(entry["record_count"]):
            raise InvalidBlockError("block longer than the SPT")
        start = self.spt_slot_start(block.spt_id)
        for name, cols in self._attr_specs():
            off, _ = self._section(name)
            data = getattr(block.attrs, name).astype("<f4").tobytes()
            if len(data) != 4 * cols * block.prefix_len:
                raise InvalidBlockError(f"bad {name} array length")
            self.backing.write(off + 4 * cols * start, data)

    def load_nodes(self, node_ids: np.ndarray) -> AttributeArrays:
        """Gather attributes for arbitrary nodes (uncounted random access)."""
        off, length = self._section("node_to_slot")
        n2s = np.frombuffer(self.backing.read(off, length), dtype="<u4")
        slots = n2s[np.asarray(node_ids, dtype=np.int64)].astype(np.int64)
        arrays = {}
        for name, cols in self._attr_specs():
            off, length = self._section(name)
            full = np.frombuffer(self.backing.read(off, length), dtype="<f4")
            full = full.reshape(self.nslots, cols) if cols > 1 else full
            arrays[name] = full[slots]
        return AttributeArrays(**arrays)

    def read_spt(self, spt_id: int) -> Spt:
        entry = self._spt_entry(spt_id)
        off, _ = self._section("spt_records")
        start = int(entry["record_offset"]) * RECORD_DTYPE.itemsize
        nbytes = int(entry["record_count"]) * RECORD_DTYPE.itemsize
        rec = np.frombuffer(self.backing.read(off + start, nbytes),
                            dtype=RECORD_DTYPE)
        return Spt.from_packed(int(entry["root"]),
                               entry["root_center"].astype(np.float64), rec)

    def read_hierarchy(self) -> Hierarchy:
        off, length = self._section("parents")
        parents = np.frombuffer(self.backing.read(off, length), dtype="<u4")
        off, length = self._section("children")
        children = np.frombuffer(self.backing.read(off, length),
                                 dtype="<u4").reshape(-1, 2)
        cap = parents.size
        off, length = self._section("slot_to_node")
        s2n = self.slot_to_node
        attrs_slots = self._read_slots(0, self.nslots)
        self.attribute_bytes_read -= self.nslots * self.bytes_per_gaussian
        attrs = AttributeArrays.zeros(cap, dtype=np.float64)
        if attrs.sh_rest.shape[1] != self.sh_cols:
            attrs.sh_rest = np.zeros((cap, self.sh_cols))
        attrs.put(s2n, attrs_slots.astype(np.float64))
        alive = np.zeros(cap, dtype=bool)
        alive[s2n] = True
        free = list(np.nonzero(~alive)[0])
        parent = np.where(parents == U32_NONE, NONE, parents.astype(np.int64))
        kids = np.where(children == U32_NONE, NONE, children.astype(np.int64))
        return Hierarchy(attrs=attrs, parent=parent.astype(np.int32),
                         children=kids.astype(np.int32), root=self.root,
                         free=free)

    def read_hspt(self) -> Hspt:
        off, length = self._section("upper_nodes")
        upper = np.frombuffer(self.backing.read(off, length),
                              dtype="<u4").astype(np.int64)
        off, length = self._section("pass_roots")
        pass_roots = np.frombuffer(self.backing.read(off, length),
                                   dtype="<u4").astype(np.int64)
        spts = [self.read_spt(i) for i in range(self.spt_dir.size)]
        return Hspt(upper_nodes=upper, spts=spts, passthrough_roots=pass_roots,
                    size_threshold=self.size_threshold,
                    min_subtree=self.min_subtree, lod=self.lod,
                    spt_id_of={s.root: i for i, s in enumerate(spts)})

    def memory_report(self, gaussian_count: int | None = None) -> dict:
        n = self.gaussian_count if gaussian_count is None else gaussian_count
        attr = self.bytes_per_gaussian
        optim = 2 * attr  # two moment arrays mirroring every attribute float
        spt_meta = RECORD_DTYPE.itemsize
        topo = 4 + 8  # parent + child pair per node
        return {
            "attribute_bytes_per_gaussian": attr,
            "optimizer_bytes_per_gaussian": optim,
            "spt_metadata_bytes_per_gaussian": spt_meta,
            "topology_bytes_per_node": topo,
            "gaussian_count": int(n),
            "attribute_total_bytes": int(n) * attr,
            "optimizer_total_bytes": int(n) * optim,
            "spt_metadata_total_bytes": int(n) * spt_meta,
            "training_bytes_per_gaussian": attr + optim + spt_meta + topo,
        }

    def close(self):
        self.backing.close()


def open_scene(source) -> Scene:
    """Open a scene from a path or a MemoryBacking."""
    if isinstance(source, MemoryBacking):
        return Scene(source)
    return Scene(FileBacking(source))


def read_ply(path):
    """Minimal PLY point-cloud reader: ascii or binary little-endian vertex
    elements with x/y/z and optional red/green/blue. Returns (points,
    colors-or-None)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise CorruptFileError("not a PLY file (line 1)")
        fmt = None
        n_vertex = None
        props = []
        line_no = 1
        in_vertex = False
        while True:
            line = f.readline()
            line_no += 1
            if not line:
                raise CorruptFileError(f"unterminated header (line {line_no})")
            tok = line.strip().split()
            if not tok:
                continue
            if tok[0] == b"format":
                fmt = tok[1].decode()
            elif tok[0] == b"element":
                in_vertex = tok[1] == b"vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == b"property" and in_vertex:
                props.append((tok[1].decode(), tok[2].decode()))
            elif tok[0] == b"end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise CorruptFileError(f"unsupported PLY format {fmt!r} (line 2)")
        if n_vertex is None:
            raise CorruptFileError("no vertex element in header")
        names = [n for _, n in props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise CorruptFileError(f"missing vertex property {axis!r}")
        typemap = {"float": "<f4", "float32": "<f4", "double": "<f8",
                   "float64": "<f8", "uchar": "u1", "uint8": "u1",
                   "char": "i1", "short": "<i2", "ushort": "<u2",
                   "int": "<i4", "uint": "<u4"}
        if fmt == "ascii":
            rows = []
            for i in range(n_vertex):
                line = f.readline()
                line_no += 1
                vals = line.split()
                if len(vals) != len(props):
                    raise CorruptFileError(
                        f"bad vertex row (line {line_no})")
                rows.append([float(v) for v in vals])
            data = np.array(rows)
            cols = {n: data[:, i] for i, (_, n) in enumerate(props)}
        else:
            dt = np.dtype([(n, typemap[t]) for t, n in props])
            raw = f.read(dt.itemsize * n_vertex)
            if len(raw) != dt.itemsize * n_vertex:
                raise CorruptFileError(
                    f"truncated vertex data at byte {f.tell()}")
            rec = np.frombuffer(raw, dtype=dt)
            cols = {n: rec[n].astype(np.float64) for _, n in props}
        points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
        colors = None
        if all(c in cols for c in ("red", "green", "blue")):
            colors = np.stack([cols["red"], cols["green"], cols["blue"]],
                              axis=1) / 255.0
        return points, colors
