#!/usr/bin/env python
"""Generate the viewer replay fixture: a deterministic streaming session
captured as raw wire bytes plus the expected resident-set state after each
pose.

Writes test/fixtures/session.bin (all server reply messages, concatenated)
and test/fixtures/expectations.json, a list with one entry per pose:
{"messages": <reply message count>, "upper": <resident upper-set size>,
 "spts": {spt_id: selection size}}.
"""
from __future__ import annotations

import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[2] / "tests"))

from conftest import look_at_camera, random_scale_hierarchy  # noqa: E402
from glod.core import LodConfig  # noqa: E402
from glod.hspt import build_hspt  # noqa: E402
from glod.protocol import ServeSession, decode_stream  # noqa: E402


def main() -> None:
    rng = np.random.default_rng(2024)
    h = random_scale_hierarchy(rng, 300)
    lod = LodConfig(threshold=5.0)
    vols = np.prod(h.attrs.scales, axis=1)
    hspt = None
    for thresh in np.geomspace(vols.max() * 2, vols.min() * 0.5, 64):
        cand = build_hspt(h, size_threshold=float(thresh), min_subtree=2,
                          cfg=lod)
        if 4 <= len(cand.spts) <= 16:
            hspt = cand
            break
    assert hspt is not None, "no threshold yields a multi-SPT partition"
    session = ServeSession(h, hspt, lod)

    # Zoom out, back in, then orbit: forces loads, an eviction when the cut
    # coarsens past the SPT roots, and re-loads on the way back.
    radii = np.concatenate([
        np.geomspace(2.0, 400.0, 12),
        np.geomspace(400.0, 2.0, 12)[1:],
        np.full(8, 6.0),
    ])
    angles = np.concatenate([
        np.zeros(23),
        np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False),
    ])

    chunks: list[bytes] = []
    expectations = []
    for r, a in zip(radii, angles):
        pos = [r * np.cos(a), 0.5 + 0.02 * r, r * np.sin(a)]
        cam = look_at_camera(pos, [0.0, 0.0, 0.0], focal=(40.0, 40.0),
                             resolution=(64, 64))
        replies = session.handle_pose(cam)
        chunks.append(b"".join(replies))
        counts = session.resident_counts()
        expectations.append({
            "messages": len(replies),
            "upper": counts["upper"],
            "spts": {str(k): v for k, v in counts["spts"].items()},
        })

    blob = b"".join(chunks)
    kinds = [m["type"] for m in decode_stream(blob)]
    assert kinds.count("spt_load") >= 1, "fixture never loads an SPT"
    assert kinds.count("spt_evict") >= 1, "fixture never evicts an SPT"
    assert kinds.count("upper_set") >= 2, "fixture upper set never changes"

    out_dir = pathlib.Path(__file__).resolve().parents[1] / "test" / "fixtures"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "session.bin").write_bytes(blob)
    (out_dir / "expectations.json").write_text(
        json.dumps(expectations, indent=1) + "\n")
    print(f"{len(blob)} bytes, {len(kinds)} messages over {len(radii)} poses "
          f"({kinds.count('spt_load')} loads, {kinds.count('spt_evict')} "
          f"evicts, {kinds.count('upper_set')} upper sets)")


if __name__ == "__main__":
    main()
