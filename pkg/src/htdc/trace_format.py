"""Reader, writer and validator for the line-oriented trace wire format.

A trace file is UTF-8 text, one JSON object per line:

  line 1     header::
               {"format": "htdc-trace", "version": 1,
                "vocab_size": <int>, "layers": [<int>, ...],
                "stored_tokens": "full" | {"policy": "topn_union_candidates",
                                           "n": <int>},
                "dtype": "f32",
                "branches_recorded": ["full", "v0", "x0"]}
             ("branches_recorded" is optional and defaults to all three; an
             exporter run in full-only mode declares ["full"].)

  lines 2..  one object per decoding step, "step" ascending from 0::
               {"step": <int>, "branches": {"full": B, "v0": B, "x0": B}}
             where B is {"final": <row>, "layers": {"<j>": <row>, ...}} plus
             "stored_ids": [<int>, ...] when the stored-token policy is not
             "full". Rows are base64-encoded little-endian float32, one
             value per stored token (or per vocabulary entry under "full").

  last line  {"checksum": "<sha256 hex of every byte preceding this line>"}

Token ids outside a step's stored set read back as -inf, the engine-wide
mask sentinel. All rows are widened to float64 on load.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import TraceFormatError

TRACE_FORMAT_NAME = "htdc-trace"
TRACE_VERSION = 1
WIRE_BRANCHES = ("full", "v0", "x0")
POLICY_FULL = "full"
POLICY_TOPN = "topn_union_candidates"


def encode_row(values: Sequence[float] | np.ndarray) -> str:
    """Encode a float row as base64 little-endian float32."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 1:
        raise ValueError(f"rows must be one-dimensional, got shape {arr.shape}")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_row(text: str) -> np.ndarray:
    """Decode a base64 float32 row to float64."""
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    if len(raw) % 4 != 0:
        raise ValueError("row byte length is not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


@dataclass(frozen=True)
class StoredTokens:
    policy: str
    n: int | None = None

    def to_wire(self):
        if self.policy == POLICY_FULL:
            return POLICY_FULL
        return {"policy": self.policy, "n": self.n}


@dataclass(frozen=True)
class TraceHeader:
    vocab_size: int
    layers: tuple[int, ...]
    stored_tokens: StoredTokens
    dtype: str = "f32"
    branches_recorded: tuple[str, ...] = WIRE_BRANCHES

    def to_wire(self) -> dict:
        out = {
            "format": TRACE_FORMAT_NAME,
            "version": TRACE_VERSION,
            "vocab_size": self.vocab_size,
            "layers": list(self.layers),
            "stored_tokens": self.stored_tokens.to_wire(),
            "dtype": self.dtype,
        }
        if tuple(self.branches_recorded) != WIRE_BRANCHES:
            out["branches_recorded"] = list(self.branches_recorded)
        return out


@dataclass(frozen=True)
class BranchRecord:
    """One branch's rows at one step, widened to float64.

    ``stored_ids`` is None under the "full" policy, otherwise the sorted ids
    that ``final`` and each layer row are restricted to.
    """

    stored_ids: np.ndarray | None
    final: np.ndarray
    layer_rows: dict[int, np.ndarray] = field(repr=False)


@dataclass(frozen=True)
class StepRecord:
    step: int
    branches: dict[str, BranchRecord]


@dataclass(frozen=True)
class Violation:
    line: int
    rule: str
    message: str

    def __str__(self) -> str:
        return f"line {self.line} [{self.rule}] {self.message}"


@dataclass
class ValidationReport:
    path: str
    violations: list[Violation]

    @property
    def valid(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.valid:
            return f"{self.path}: OK"
        lines = [f"{self.path}: {len(self.violations)} violation(s)"]
        lines.extend(f"  {v}" for v in self.violations)
        return "\n".join(lines)


def write_trace(path, header: TraceHeader, steps: Iterable[Mapping]) -> None:
    """Write a trace file, computing the trailing checksum.

    Each element of ``steps`` maps a wire branch name to
    {"final": row, "layers": {j: row}, "stored_ids": optional ids}.
    Rows may be any float sequence; they are stored as float32.
    """
    body = bytearray()
    body += json.dumps(header.to_wire(), separators=(",", ":")).encode("utf-8")
    body += b"\n"
    for index, branches in enumerate(steps):
        wire_branches = {}
        for name in WIRE_BRANCHES:
            if name not in branches:
                continue
            rec = branches[name]
            entry = {}
            if rec.get("stored_ids") is not None:
                entry["stored_ids"] = [int(t) for t in rec["stored_ids"]]
            entry["final"] = encode_row(rec["final"])
            entry["layers"] = {str(j): encode_row(row) for j, row in sorted(rec["layers"].items())}
            wire_branches[name] = entry
        line = {"step": index, "branches": wire_branches}
        body += json.dumps(line, separators=(",", ":")).encode("utf-8")
        body += b"\n"
    digest = hashlib.sha256(bytes(body)).hexdigest()
    body += json.dumps({"checksum": digest}, separators=(",", ":")).encode("utf-8")
    body += b"\n"
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def _split_lines(data: bytes) -> list[tuple[int, int, bytes]]:
    """Return (line_number, byte_offset, content) for each non-empty line."""
    out = []
    offset = 0
    number = 1
    for chunk in data.split(b"\n"):
        if chunk:
            out.append((number, offset, chunk))
        offset += len(chunk) + 1
        number += 1
    return out


class _Collector:
    """Accumulates violations; in strict mode the first one raises."""

    def __init__(self, strict: bool):
        self.strict = strict
        self.violations: list[Violation] = []

    def add(self, line: int, rule: str, message: str) -> None:
        if self.strict:
            raise TraceFormatError(message, line=line, rule=rule)
        self.violations.append(Violation(line=line, rule=rule, message=message))


def _parse_header(line_no: int, raw: bytes, out: _Collector) -> TraceHeader | None:
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        out.add(line_no, "header-json", f"header is not valid JSON: {exc}")
        return None
    if not isinstance(obj, dict):
        out.add(line_no, "header-json", "header must be a JSON object")
        return None
    if obj.get("format") != TRACE_FORMAT_NAME:
        out.add(line_no, "format", f"unknown format {obj.get('format')!r}")
        return None
    if obj.get("version") != TRACE_VERSION:
        out.add(line_no, "version", f"unsupported version {obj.get('version')!r}")
        return None
    ok = True
    vocab = obj.get("vocab_size")
    if not isinstance(vocab, int) or vocab < 1:
        out.add(line_no, "vocab", f"vocab_size must be a positive integer, got {vocab!r}")
        ok = False
    layers = obj.get("layers")
    if (
        not isinstance(layers, list)
        or not layers
        or not all(isinstance(j, int) and j >= 0 for j in layers)
        or sorted(set(layers)) != layers
    ):
        out.add(line_no, "layers", f"layers must be a sorted list of distinct ints, got {layers!r}")
        ok = False
    if obj.get("dtype") != "f32":
        out.add(line_no, "dtype", f"dtype must be 'f32', got {obj.get('dtype')!r}")
        ok = False
    stored = obj.get("stored_tokens")
    policy: StoredTokens | None = None
    if stored == POLICY_FULL:
        policy = StoredTokens(policy=POLICY_FULL)
    elif isinstance(stored, dict) and stored.get("policy") == POLICY_TOPN:
        n = stored.get("n")
        if isinstance(n, int) and n >= 1:
            policy = StoredTokens(policy=POLICY_TOPN, n=n)
    if policy is None:
        out.add(line_no, "policy", f"unrecognized stored_tokens policy: {stored!r}")
        ok = False
    branches = obj.get("branches_recorded", list(WIRE_BRANCHES))
    if (
        not isinstance(branches, list)
        or not branches
        or any(b not in WIRE_BRANCHES for b in branches)
        or len(set(branches)) != len(branches)
        or "full" not in branches
    ):
        out.add(
            line_no,
            "branches",
            f"branches_recorded must be distinct names from {WIRE_BRANCHES} and "
            f"include 'full', got {branches!r}",
        )
        ok = False
    if not ok:
        return None
    return TraceHeader(
        vocab_size=vocab,
        layers=tuple(layers),
        stored_tokens=policy,
        dtype="f32",
        branches_recorded=tuple(branches),
    )


def _parse_branch(
    line_no: int, name: str, entry, header: TraceHeader, out: _Collector
) -> BranchRecord | None:
    if not isinstance(entry, dict) or "final" not in entry or "layers" not in entry:
        out.add(line_no, "step-schema", f"branch '{name}' must carry 'final' and 'layers'")
        return None
    truncated = header.stored_tokens.policy != POLICY_FULL
    stored_ids = None
    expected_len = header.vocab_size
    if truncated:
        raw_ids = entry.get("stored_ids")
        if (
            not isinstance(raw_ids, list)
            or not raw_ids
            or not all(isinstance(t, int) and 0 <= t < header.vocab_size for t in raw_ids)
            or sorted(set(raw_ids)) != raw_ids
        ):
            out.add(
                line_no,
                "stored-ids",
                f"branch '{name}' needs sorted distinct in-vocabulary stored_ids "
                f"under policy '{header.stored_tokens.policy}'",
            )
            return None
        stored_ids = np.asarray(raw_ids, dtype=np.int64)
        expected_len = len(raw_ids)
    elif "stored_ids" in entry:
        out.add(line_no, "stored-ids", f"branch '{name}' carries stored_ids under policy 'full'")
        return None

    def read_row(label: str, text) -> np.ndarray | None:
        if not isinstance(text, str):
            out.add(line_no, "row", f"{label} of branch '{name}' must be a base64 string")
            return None
        try:
            row = decode_row(text)
        except (ValueError, TypeError) as exc:
            out.add(line_no, "row", f"{label} of branch '{name}' is not decodable: {exc}")
            return None
        if row.size != expected_len:
            out.add(
                line_no,
                "row-length",
                f"{label} of branch '{name}' holds {row.size} values, expected {expected_len}",
            )
            return None
        return row

    final = read_row("final row", entry["final"])
    if final is None:
        return None
    layers_obj = entry["layers"]
    if not isinstance(layers_obj, dict):
        out.add(line_no, "step-schema", f"branch '{name}' layers must be an object")
        return None
    seen: dict[int, np.ndarray] = {}
    for key, text in layers_obj.items():
        try:
            j = int(key)
        except (TypeError, ValueError):
            out.add(line_no, "layer-coverage", f"branch '{name}' has non-integer layer key {key!r}")
            return None
        if j not in header.layers:
            out.add(line_no, "layer-coverage", f"branch '{name}' records undeclared layer {j}")
            return None
        row = read_row(f"layer {j} row", text)
        if row is None:
            return None
        seen[j] = row
    missing = [j for j in header.layers if j not in seen]
    if missing:
        out.add(line_no, "layer-coverage", f"branch '{name}' is missing layer rows {missing}")
        return None
    return BranchRecord(stored_ids=stored_ids, final=final, layer_rows=seen)


def parse_trace(path, strict: bool = True) -> tuple[TraceHeader | None, list[StepRecord], list[Violation]]:
    """Parse and check a trace file.

    Integrity is checked first: the trailing checksum line must be present
    and must match the bytes before it. In strict mode the first problem
    raises TraceFormatError; otherwise all violations are collected.
    """
    out = _Collector(strict)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        out.add(0, "io", f"cannot read trace: {exc}")
        return None, [], out.violations
    lines = _split_lines(data)
    if len(lines) < 2:
        out.add(len(lines), "empty", "trace needs at least a header and a checksum line")
        return None, [], out.violations

    check_no, check_offset, check_raw = lines[-1]
    declared = None
    try:
        obj = json.loads(check_raw.decode("utf-8"))
        declared = obj.get("checksum") if isinstance(obj, dict) else None
    except (UnicodeDecodeError, json.JSONDecodeError):
        declared = None
    if not isinstance(declared, str):
        out.add(check_no, "checksum-missing", "last line must be a checksum object")
        return None, [], out.violations
    actual = hashlib.sha256(data[:check_offset]).hexdigest()
    if actual != declared:
        out.add(check_no, "checksum", f"checksum mismatch: declared {declared}, computed {actual}")
        if not strict:
            # Integrity is already broken; schema findings below are best effort.
            pass

    header = _parse_header(lines[0][0], lines[0][2], out)
    steps: list[StepRecord] = []
    if header is not None:
        expected_step = 0
        for line_no, _, raw in lines[1:-1]:
            try:
                obj = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                out.add(line_no, "step-json", f"step line is not valid JSON: {exc}")
                continue
            if not isinstance(obj, dict) or "step" not in obj or "branches" not in obj:
                out.add(line_no, "step-schema", "step line must carry 'step' and 'branches'")
                continue
            if obj["step"] != expected_step:
                out.add(
                    line_no,
                    "step-order",
                    f"expected step {expected_step}, got {obj['step']!r}",
                )
                continue
            branches_obj = obj["branches"]
            if not isinstance(branches_obj, dict):
                out.add(line_no, "step-schema", "'branches' must be an object")
                continue
            unknown = [b for b in branches_obj if b not in WIRE_BRANCHES]
            if unknown:
                out.add(line_no, "branch-unknown", f"unknown branch keys {unknown}")
                continue
            missing = [b for b in header.branches_recorded if b not in branches_obj]
            if missing:
                out.add(
                    line_no,
                    "branch-missing",
                    f"step {expected_step} is missing recorded branch(es) {missing}",
                )
                continue
            extra = [b for b in branches_obj if b not in header.branches_recorded]
            if extra:
                out.add(
                    line_no,
                    "branch-unknown",
                    f"step {expected_step} records undeclared branch(es) {extra}",
                )
                continue
            parsed: dict[str, BranchRecord] = {}
            bad = False
            for name in header.branches_recorded:
                rec = _parse_branch(line_no, name, branches_obj[name], header, out)
                if rec is None:
                    bad = True
                    break
                parsed[name] = rec
            if bad:
                continue
            steps.append(StepRecord(step=expected_step, branches=parsed))
            expected_step += 1
        if not steps:
            out.add(lines[-1][0], "empty", "trace holds no step records")
    return header, steps, out.violations


def read_trace(path) -> tuple[TraceHeader, list[StepRecord]]:
    """Strict parse: raises TraceFormatError on the first violation."""
    header, steps, _ = parse_trace(path, strict=True)
    assert header is not None  # strict mode raised otherwise
    return header, steps


def validate_trace(path) -> ValidationReport:
    """Collect every violation instead of raising; used by the CLI."""
    _, _, violations = parse_trace(path, strict=False)
    return ValidationReport(path=str(path), violations=violations)
