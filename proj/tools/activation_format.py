"""Writer for SAEACT01 activation shards and their JSON manifest.

This is the serialization half of an activation exporter: a capture hook
hands over one h*w*d block output per (prompt, timestep, half) and the
writer flattens it into records. Only numpy is required.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SAEACT01"
VERSION = 1
_HEADER = struct.Struct("<5IQ")
_PREFIX = struct.Struct("<HHIB3x")


class ShardWriter:
    def __init__(self, path, d, h, w, T):
        self.path = Path(path)
        self.d, self.h, self.w, self.T = d, h, w, T
        self.count = 0
        self._fh = open(self.path, "wb")
        self._write_header()

    def _write_header(self):
        self._fh.seek(0)
        self._fh.write(MAGIC)
        self._fh.write(_HEADER.pack(VERSION, self.d, self.h, self.w, self.T, self.count))

    def add_map(self, feature_map, timestep, concept_id, cond):
        fmap = np.asarray(feature_map, dtype=np.float32)
        if fmap.shape != (self.h, self.w, self.d):
            raise ValueError(f"expected block output {(self.h, self.w, self.d)}, got {fmap.shape}")
        if not 0 <= timestep < self.T:
            raise ValueError(f"timestep {timestep} outside T={self.T}")
        rows = fmap.reshape(self.h * self.w, self.d)
        for j, row in enumerate(rows):
            self._fh.write(_PREFIX.pack(timestep, concept_id, j, 1 if cond else 0))
            self._fh.write(row.astype("<f4").tobytes())
        self.count += rows.shape[0]

    def close(self):
        self._write_header()
        self._fh.close()
        return self.count


def write_manifest(path, block_name, d, h, w, T, concepts, shards, cond_policy="conditioned-only"):
    manifest = {
        "block_name": block_name,
        "d": d,
        "h": h,
        "w": w,
        "T": T,
        "concepts": {str(k): v for k, v in concepts.items()},
        "shards": [{"path": p, "records": n} for p, n in shards],
        "cond_policy": cond_policy,
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")
