"""Writer for the trace wire format the decoding engine replays.

The format is line-oriented UTF-8 JSON: a header line, one line per step
with base64-encoded little-endian float32 rows, and a trailing line
holding the sha256 of every byte that precedes it. Rows are restricted
to each branch's ``stored_ids`` when a truncating stored-token policy is
in effect; absent ids read back as -inf on the engine side.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .job import POLICY_FULL, StoredPolicy

FORMAT_NAME = "htdc-trace"
FORMAT_VERSION = 1
BRANCH_ORDER = ("full", "v0", "x0")


def encode_row(values: Sequence[float] | np.ndarray) -> str:
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 1:
        raise ValueError(f"rows must be one-dimensional, got shape {arr.shape}")
    return base64.b64encode(arr.tobytes()).decode("ascii")


@dataclass(frozen=True)
class WireHeader:
    vocab_size: int
    layers: tuple[int, ...]
    stored: StoredPolicy
    branches: tuple[str, ...] = BRANCH_ORDER

    def to_obj(self) -> dict:
        stored = (
            POLICY_FULL
            if not self.stored.truncates
            else {"policy": self.stored.policy, "n": self.stored.n}
        )
        out = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "vocab_size": self.vocab_size,
            "layers": list(self.layers),
            "stored_tokens": stored,
            "dtype": "f32",
        }
        if tuple(self.branches) != BRANCH_ORDER:
            out["branches_recorded"] = list(self.branches)
        return out


def write_trace(path, header: WireHeader, steps: Iterable[Mapping]) -> None:
    """Serialize recorded steps and append the checksum line.

    Each step maps a branch name to {"final": row, "layers": {j: row}}
    plus "stored_ids" when truncating.
    """
    body = bytearray()
    body += json.dumps(header.to_obj(), separators=(",", ":")).encode("utf-8") + b"\n"
    for index, branches in enumerate(steps):
        wire = {}
        for name in BRANCH_ORDER:
            if name not in branches:
                continue
            rec = branches[name]
            entry = {}
            if rec.get("stored_ids") is not None:
                entry["stored_ids"] = [int(t) for t in rec["stored_ids"]]
            entry["final"] = encode_row(rec["final"])
            entry["layers"] = {
                str(j): encode_row(row) for j, row in sorted(rec["layers"].items())
            }
            wire[name] = entry
        body += json.dumps({"step": index, "branches": wire}, separators=(",", ":")).encode(
            "utf-8"
        ) + b"\n"
    digest = hashlib.sha256(bytes(body)).hexdigest()
    body += json.dumps({"checksum": digest}, separators=(",", ":")).encode("utf-8") + b"\n"
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(body))
    except OSError as exc:
        raise DataError(f"cannot write trace {path}: {exc}") from None
