"""Bit-exact communication accounting and structured metrics output.

All bit counts are model counts of the transmitted payloads (value bits,
index bits, quantization headers), not measured serialization sizes: the
simulator exchanges in-memory arrays and the ledger is the source of truth
for communication-cost axes.

Three downlink patterns are supported:
  1  the server rebroadcasts every client's compressed delta
  2  the server sends each client the partial derivative of the batch loss
     with respect to that client's representation rows (dense 32-bit)
  3  the server broadcasts the aggregated representation matrix plus its own
     parameter block (dense 32-bit)
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

from .compressors import payload_bits  # noqa: F401  (re-exported, part of the API)

CSV_HEADER = "t,loss,grad_sq,surrogate_grad_sq,distortion,uplink_bits,downlink_bits,val_acc"

DOWNLINK_SCHEMES = (1, 2, 3)


class SinkError(OSError):
    pass


def downlink_bits(scheme: int, uplink_bits: int, *, batch_size: int, rep_dims,
                  n_samples: int, d0: int) -> int:
    """Per-round downlink cost given the round's uplink payloads."""
    if scheme == 1:
        return uplink_bits
    if scheme == 2:
        return sum(32 * batch_size * e for e in rep_dims)
    if scheme == 3:
        return 32 * (n_samples * rep_dims[0] + d0)
    raise ValueError(f"unknown downlink scheme {scheme}")


def init_downlink_bits(scheme: int, init_uplink: int, *, n_samples: int, rep_dims,
                       d0: int) -> int:
    """Downlink cost of distributing the initial surrogates.

    Scheme 1 rebroadcasts the initial payloads; scheme 2 keeps the surrogates
    at the server only, so nothing flows down; scheme 3 sends one aggregated
    broadcast.
    """
    if scheme == 1:
        return init_uplink
    if scheme == 2:
        return 0
    if scheme == 3:
        return 32 * (n_samples * rep_dims[0] + d0)
    raise ValueError(f"unknown downlink scheme {scheme}")


def round_cost(scheme: int, spec, *, rep_dims, delta_rows: int, batch_size: int,
               n_samples: int, d0: int) -> tuple[int, int]:
    """(uplink, downlink) bits of one round.

    delta_rows is the number of rows in each client's transmitted object: the
    batch size for batch-composed compressors, the full sample count for
    full-matrix (identity) exchange.
    """
    uplink = sum(payload_bits(spec, delta_rows * e) for e in rep_dims)
    return uplink, downlink_bits(scheme, uplink, batch_size=batch_size,
                                 rep_dims=rep_dims, n_samples=n_samples, d0=d0)


@dataclass
class CommLedger:
    """Per-round bit counts plus the one-off initialization cost."""

    scheme: int
    init_uplink_bits: int = 0
    init_downlink_bits: int = 0
    uplink_rounds: list = field(default_factory=list)
    downlink_rounds: list = field(default_factory=list)

    def record(self, uplink: int, downlink: int):
        if uplink < 0 or downlink < 0:
            raise ValueError("bit counts must be non-negative")
        self.uplink_rounds.append(uplink)
        self.downlink_rounds.append(downlink)

    @property
    def uplink_total(self) -> int:
        return self.init_uplink_bits + sum(self.uplink_rounds)

    @property
    def downlink_total(self) -> int:
        return self.init_downlink_bits + sum(self.downlink_rounds)

    @classmethod
    def from_result(cls, result, scheme: int) -> "CommLedger":
        ledger = cls(scheme, result.init_uplink_bits, result.init_downlink_bits)
        for tr in result.traces:
            ledger.record(tr.uplink_bits, tr.downlink_bits)
        return ledger


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))  # shortest decimal that round-trips


def _open_sink(sink, mode):
    if hasattr(sink, "write"):
        return sink, False
    try:
        return open(sink, mode, encoding="utf-8", newline=""), True
    except OSError as exc:
        raise SinkError(str(exc)) from exc


def emit_trace(traces, sink) -> None:
    """Write one CSV row per round; missing diagnostics become empty fields."""
    fh, close = _open_sink(sink, "w")
    try:
        fh.write(CSV_HEADER + "\n")
        for tr in traces:
            row = [tr.t, tr.loss, tr.grad_sq, tr.surrogate_grad_sq, tr.distortion,
                   tr.uplink_bits, tr.downlink_bits, tr.val_acc]
            fh.write(",".join(_cell(v) for v in row) + "\n")
    except OSError as exc:
        raise SinkError(str(exc)) from exc
    finally:
        if close:
            fh.close()


def parse_trace(source) -> list:
    """Read back a CSV produced by emit_trace, to full precision."""
    from .protocol import RoundTrace

    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise SinkError("not a trace CSV (bad header)")
    traces = []
    for line in lines[1:]:
        t, loss, grad_sq, sgrad, dist, up, down, acc = line.split(",")
        traces.append(RoundTrace(
            t=int(t),
            loss=float(loss),
            surrogate_grad_sq=float(sgrad),
            uplink_bits=int(up),
            downlink_bits=int(down),
            grad_sq=float(grad_sq) if grad_sq else None,
            distortion=float(dist) if dist else None,
            val_acc=float(acc) if acc else None,
        ))
    return traces


def emit_summary(summary: dict, sink) -> None:
    """Canonical JSON: sorted keys, two-space indent, trailing newline."""
    text = json.dumps(summary, sort_keys=True, indent=2, allow_nan=False) + "\n"
    fh, close = _open_sink(sink, "w")
    try:
        fh.write(text)
    except OSError as exc:
        raise SinkError(str(exc)) from exc
    finally:
        if close:
            fh.close()


def summary_text(summary: dict) -> str:
    buf = io.StringIO()
    emit_summary(summary, buf)
    return buf.getvalue()
