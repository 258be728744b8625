"""Canonical flow records and their line-delimited JSON storage.

A flow file holds one JSON object per line::

    {"flow_id": "f1", "label": "app", "packets": [{"dir": "+", "len": 328,
     "payload_hex": "1a2b"}], "dst_ip": "1.2.3.4", "dst_port": 443,
     "sni": "example.com", "cert_digest": null}

Packets are kept exactly as ingested; nothing drops zero-payload packets or
retransmissions, so the packet-length sequence reflects whatever the record
contains.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable

from .errors import FlowParseError, FlowValidationError

OUTBOUND = "+"
INBOUND = "-"


@dataclass(frozen=True)
class PacketView:
    direction: str
    length_bytes: int
    payload: bytes = b""

    def __post_init__(self):
        if self.direction not in (OUTBOUND, INBOUND):
            raise FlowValidationError(f"direction must be '+' or '-', got {self.direction!r}")
        if self.length_bytes < 1:
            raise FlowValidationError(f"length_bytes must be >= 1, got {self.length_bytes}")
        if len(self.payload) > self.length_bytes:
            raise FlowValidationError(
                f"payload of {len(self.payload)} bytes exceeds packet length {self.length_bytes}"
            )

    @property
    def signed_length(self) -> int:
        return self.length_bytes if self.direction == OUTBOUND else -self.length_bytes


@dataclass(frozen=True)
class BackgroundMeta:
    """Destination and TLS identity of a flow.

    Never used as a model feature; only background filtering reads it.
    """

    dst_ip: str
    dst_port: int
    sni: str | None = None
    cert_digest: str | None = None

    def __post_init__(self):
        if not self.dst_ip:
            raise FlowValidationError("dst_ip is required")
        if not 0 <= self.dst_port <= 65535:
            raise FlowValidationError(f"dst_port out of range: {self.dst_port}")

    @property
    def dst_tuple(self) -> tuple[str, int]:
        return (self.dst_ip, self.dst_port)


@dataclass(frozen=True)
class FlowRecord:
    flow_id: str
    label: str
    packets: tuple[PacketView, ...]
    background: BackgroundMeta
    # set once header bytes have been stripped; re-sanitizing is then a no-op
    sanitized: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not self.packets:
            raise FlowValidationError(f"flow {self.flow_id!r} has no packets")
        if not isinstance(self.packets, tuple):
            object.__setattr__(self, "packets", tuple(self.packets))

    @property
    def payload_bytes(self) -> int:
        return sum(len(p.payload) for p in self.packets)


def flow_to_dict(flow: FlowRecord) -> dict:
    bg = flow.background
    obj = {
        "flow_id": flow.flow_id,
        "label": flow.label,
        "packets": [
            {"dir": p.direction, "len": p.length_bytes, "payload_hex": p.payload.hex()}
            for p in flow.packets
        ],
        "dst_ip": bg.dst_ip,
        "dst_port": bg.dst_port,
        "sni": bg.sni,
        "cert_digest": bg.cert_digest,
    }
    if flow.sanitized:
        obj["sanitized"] = True
    return obj


def flow_from_dict(obj: dict) -> FlowRecord:
    try:
        packets = tuple(
            PacketView(
                direction=p["dir"],
                length_bytes=int(p["len"]),
                payload=bytes.fromhex(p.get("payload_hex", "")),
            )
            for p in obj["packets"]
        )
        background = BackgroundMeta(
            dst_ip=obj["dst_ip"],
            dst_port=int(obj["dst_port"]),
            sni=obj.get("sni"),
            cert_digest=obj.get("cert_digest"),
        )
        return FlowRecord(
            flow_id=str(obj["flow_id"]),
            label=obj.get("label") or "",
            packets=packets,
            background=background,
            sanitized=bool(obj.get("sanitized", False)),
        )
    except KeyError as exc:
        raise FlowParseError(f"missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise FlowParseError(str(exc)) from None


def dumps_flow(flow: FlowRecord) -> str:
    return json.dumps(flow_to_dict(flow), separators=(",", ":"), ensure_ascii=False)


def load_flows(path: str | os.PathLike) -> list[FlowRecord]:
    """Read a line-delimited flow file, preserving order.

    Blank lines are ignored. Raises :class:`FlowParseError` carrying the
    1-based line number of the first malformed line, and
    :class:`FlowValidationError` when a ``flow_id`` repeats.
    """
    flows: list[FlowRecord] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FlowParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if not isinstance(obj, dict):
                raise FlowParseError("expected a JSON object", line=lineno)
            try:
                flow = flow_from_dict(obj)
            except FlowParseError as exc:
                raise FlowParseError(str(exc), line=lineno) from None
            except FlowValidationError as exc:
                raise FlowParseError(str(exc), line=lineno) from None
            if flow.flow_id in seen:
                raise FlowValidationError(
                    f"duplicate flow_id {flow.flow_id!r} on lines {seen[flow.flow_id]} and {lineno}"
                )
            seen[flow.flow_id] = lineno
            flows.append(flow)
    return flows


def write_flows(flows: Iterable[FlowRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for flow in flows:
            fh.write(dumps_flow(flow))
            fh.write("\n")


def sanitize(flow: FlowRecord, strip_prefix: int = 0) -> FlowRecord:
    """Drop ``strip_prefix`` leading bytes from every packet payload.

    Payloads are expected to be record bytes already, so the default prefix
    of 0 returns an equal flow. Payloads shorter than the prefix become
    empty. A flow already marked ``sanitized`` is returned as is. Background
    metadata is carried through untouched; it is not a model feature.
    """
    if strip_prefix < 0:
        raise ValueError("strip_prefix must be non-negative")
    if flow.sanitized:
        return flow
    packets = tuple(replace(p, payload=p.payload[strip_prefix:]) for p in flow.packets)
    return replace(flow, packets=packets, sanitized=True)


@dataclass
class ValidationReport:
    total: int = 0
    label_counts: dict[str, int] = field(default_factory=dict)
    unlabeled: list[str] = field(default_factory=list)
    zero_payload: list[str] = field(default_factory=list)
    missing_sni: list[str] = field(default_factory=list)
    missing_cert: list[str] = field(default_factory=list)
    duplicate_ids: list[str] = field(default_factory=list)

    @property
    def errors(self) -> list[str]:
        return [f"duplicate flow_id {fid!r}" for fid in self.duplicate_ids]

    @property
    def ok(self) -> bool:
        return not self.errors

    def summary(self) -> str:
        lines = [f"{self.total} flows, {len(self.label_counts)} labels"]
        for label, count in sorted(self.label_counts.items()):
            lines.append(f"  {label}: {count}")
        lines.append(f"unlabeled: {len(self.unlabeled)}")
        lines.append(f"zero-payload flows: {len(self.zero_payload)}")
        lines.append(f"missing SNI: {len(self.missing_sni)}; missing cert: {len(self.missing_cert)}")
        return "\n".join(lines)


def validate_corpus(flows: Iterable[FlowRecord]) -> ValidationReport:
    report = ValidationReport()
    counts: Counter[str] = Counter()
    ids: Counter[str] = Counter()
    for flow in flows:
        report.total += 1
        ids[flow.flow_id] += 1
        if flow.label:
            counts[flow.label] += 1
        else:
            report.unlabeled.append(flow.flow_id)
        if flow.payload_bytes == 0:
            report.zero_payload.append(flow.flow_id)
        if not flow.background.sni:
            report.missing_sni.append(flow.flow_id)
        if not flow.background.cert_digest:
            report.missing_cert.append(flow.flow_id)
    report.label_counts = dict(sorted(counts.items()))
    report.duplicate_ids = sorted(fid for fid, n in ids.items() if n > 1)
    return report
