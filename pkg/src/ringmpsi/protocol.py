"""Party state machines: leader, middle assistants, terminal assistant.

Each party is one sequential state machine over at most three channels
(previous neighbor, next neighbor, and the terminal-to-leader return
edge).  Session setup exchanges a header frame in both directions on
every channel and aborts with a named field if the serialized parameter
blocks differ; the leader then samples the shared PRF key and forwards
it once around the ring.

All ROT handshakes complete before any matrix mask flows: every party
initiates its sender-side handshake downstream before answering its
receiver-side handshake upstream, so the handshake wave reaches the far
end of the ring and unwinds back before the leader releases the first
mask matrix.  On any failure a party best-effort notifies its neighbors
with an ABORT frame and raises; it never emits a wrong intersection.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from . import soprf
from .bitmatrix import ChoiceString
from .crypto import OT_ELEM_BYTES, PrfKey, h1, prf_indices_batch, rot_batch
from .params import ProtocolParams, diff_params_text, params_to_text
from .transport import (
    MSG_KEY,
    MSG_PARAMS,
    MSG_PSI,
    Channel,
    ProtocolError,
    TransportError,
)

__all__ = [
    "PartyRole",
    "PartyConfig",
    "PartyReport",
    "IntersectionResult",
    "pad_set",
    "key_share",
    "run_leader",
    "run_middle_assistant",
    "run_terminal_assistant",
    "SESSION_MAGIC",
    "SESSION_VERSION",
]

log = logging.getLogger("mpsi.protocol")

SESSION_MAGIC = b"MPSI"
SESSION_VERSION = 1
# magic, version u16, sender u32, receiver u32, OT group element width u16
_HEADER_PREFIX = struct.Struct("<4sHIIH")


class PartyRole(Enum):
    LEADER = "leader"
    MIDDLE = "middle"
    TERMINAL = "terminal"


@dataclass
class PartyConfig:
    """Everything one party needs to run: identity, parameters, channels.

    Channels are injected by the caller (the simulator wires in-memory
    pairs; the CLI dials TCP neighbors first).  `debug_sink`, when set,
    receives white-box copies of the party's wheel state for invariant
    tests; it must stay None in production use.
    """

    index: int
    n_parties: int
    params: ProtocolParams
    rng: object  # random.Random-compatible
    rot_mode: str = "dealer"
    prev: Optional[Channel] = None
    next: Optional[Channel] = None
    ret: Optional[Channel] = None
    debug_sink: Optional[dict] = None

    def __post_init__(self):
        if not 1 <= self.index <= self.n_parties:
            raise ValueError("index must be in [1, n]")
        if self.n_parties < 2:
            raise ValueError("need at least two parties")
        if self.n_parties != self.params.n_parties:
            raise ValueError("party count disagrees with params")

    @property
    def role(self) -> PartyRole:
        if self.index == 1:
            return PartyRole.LEADER
        if self.index == self.n_parties:
            return PartyRole.TERMINAL
        return PartyRole.MIDDLE

    def channels(self) -> dict[str, Channel]:
        out = {}
        if self.prev is not None:
            out["prev"] = self.prev
        if self.next is not None:
            out["next"] = self.next
        if self.ret is not None:
            out["ret"] = self.ret
        return out


@dataclass
class PartyReport:
    """Per-channel traffic counters and per-phase wall times."""

    index: int
    role: str
    metrics: dict = field(default_factory=dict)  # channel name -> ChannelMetrics
    phase_seconds: dict = field(default_factory=dict)


@dataclass
class IntersectionResult:
    """The leader's output: matched original elements plus its report."""

    elements: list[bytes]
    report: PartyReport


class _Phases:
    def __init__(self):
        self.seconds: dict[str, float] = {}
        self._t = time.perf_counter()

    def mark(self, name: str):
        now = time.perf_counter()
        self.seconds[name] = self.seconds.get(name, 0.0) + (now - self._t)
        self._t = now


def pad_set(elements: Sequence[bytes], set_size: int, rng, pad_bytes: int = 32) -> tuple[list[bytes], int]:
    """Deduplicate, then pad with fresh random elements up to set_size.

    Returns (padded list, real_count); the first real_count entries are
    the deduplicated originals in input order, the rest are random
    padding that the leader never reports (a padding element colliding
    with anyone's real element is a 2^-2lambda event).
    """
    deduped = list(dict.fromkeys(bytes(x) for x in elements))
    if len(deduped) > set_size:
        raise ValueError(f"set size {len(deduped)} exceeds bound {set_size}")
    real = len(deduped)
    deduped.extend(rng.randbytes(pad_bytes) for _ in range(set_size - real))
    return deduped, real


def _header_payload(cfg: PartyConfig, peer_index: int) -> bytes:
    text = params_to_text(cfg.params).encode("utf-8")
    return _HEADER_PREFIX.pack(SESSION_MAGIC, SESSION_VERSION, cfg.index, peer_index,
                               OT_ELEM_BYTES) + text


def _exchange_header(cfg: PartyConfig, channel: Channel, peer_index: int):
    channel.send_frame(MSG_PARAMS, _header_payload(cfg, peer_index))
    _, payload = channel.recv_frame(MSG_PARAMS)
    if len(payload) < _HEADER_PREFIX.size:
        raise ProtocolError("session header too short")
    magic, version, sender, receiver, ot_len = _HEADER_PREFIX.unpack_from(payload)
    if magic != SESSION_MAGIC:
        raise ProtocolError("bad protocol magic")
    if version != SESSION_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if sender != peer_index or receiver != cfg.index:
        raise ProtocolError(
            f"ring wiring error: expected party {peer_index}, got {sender}->{receiver}"
        )
    if ot_len != OT_ELEM_BYTES:
        raise ProtocolError(f"OT group element width mismatch: {ot_len} != {OT_ELEM_BYTES}")
    theirs = payload[_HEADER_PREFIX.size :].decode("utf-8")
    bad = diff_params_text(params_to_text(cfg.params), theirs)
    if bad is not None:
        raise ProtocolError(f"params mismatch with party {peer_index}: field '{bad}' differs")


def key_share(cfg: PartyConfig, k: Optional[PrfKey] = None) -> PrfKey:
    """Exchange session headers on every channel and move the key forward.

    The leader samples the key (unless one is supplied) and sends it to
    the next party; assistants receive it from the previous party and
    middle assistants forward it.  Afterwards every party holds an
    identical key and has asserted byte-identical serialized parameters
    with each neighbor.
    """
    for name, channel in cfg.channels().items():
        peer = {"prev": cfg.index - 1, "next": cfg.index + 1}.get(name)
        if peer is None:  # return edge connects party n and party 1
            peer = cfg.n_parties if cfg.index == 1 else 1
        _exchange_header(cfg, channel, peer)

    key_len = cfg.params.key_bytes
    if cfg.role is PartyRole.LEADER:
        if k is None:
            k = PrfKey(cfg.rng.randbytes(key_len))
        cfg.next.send_frame(MSG_KEY, k.key)
        return k
    _, raw = cfg.prev.recv_frame(MSG_KEY)
    if len(raw) != key_len:
        raise ProtocolError(f"key must be {key_len} bytes, got {len(raw)}")
    k = PrfKey(raw)
    if cfg.role is PartyRole.MIDDLE:
        cfg.next.send_frame(MSG_KEY, k.key)
    return k


def _abort_neighbors(cfg: PartyConfig, reason: str):
    for channel in cfg.channels().values():
        channel.send_abort(reason)


def _close_all(cfg: PartyConfig):
    for channel in cfg.channels().values():
        channel.close()


def _report(cfg: PartyConfig, phases: _Phases) -> PartyReport:
    return PartyReport(
        index=cfg.index,
        role=cfg.role.value,
        metrics={name: ch.metrics for name, ch in cfg.channels().items()},
        phase_seconds=dict(phases.seconds),
    )


def run_leader(elements: Sequence[bytes], cfg: PartyConfig) -> IntersectionResult:
    """Drive the leader end to end and return the intersection.

    Samples and shares the key, builds the occupancy matrix from the
    padded input, runs the first hop, then matches the returned digest
    set against locally computed digests.  Only original (pre-padding)
    elements are ever reported, in input order.
    """
    if cfg.role is not PartyRole.LEADER:
        raise ValueError("run_leader requires party index 1")
    if cfg.next is None or cfg.ret is None:
        raise ValueError("leader needs next and return channels")
    params = cfg.params
    phases = _Phases()
    try:
        k = key_share(cfg)
        phases.mark("setup")

        padded, n_real = pad_set(elements, params.set_size, cfg.rng)
        digests = [h1(x, params) for x in padded]
        indices = prf_indices_batch(k, digests, params)
        d1 = soprf.occupancy_from_indices(indices, params)
        phases.mark("preprocess")

        rot = rot_batch(cfg.rot_mode, "sender", cfg.next, params.cols, params.rows, rng=cfg.rng)
        phases.mark("handshake")

        base = soprf.leader_first_hop(d1, rot, cfg.next)
        if cfg.debug_sink is not None:
            cfg.debug_sink[cfg.index] = {"base": base, "occupancy": d1.d}
        phases.mark("wheel")

        _, payload = cfg.ret.recv_frame(MSG_PSI)
        if len(payload) != params.set_size * params.h2_bytes:
            raise ProtocolError(
                f"digest set must hold {params.set_size} values, got {len(payload)} bytes"
            )
        width = params.h2_bytes
        psi_set = {payload[i : i + width] for i in range(0, len(payload), width)}
        local = soprf.eval_oprf(base, k, padded[:n_real], params, indices=indices[:n_real])
        matched = [padded[i] for i, value in enumerate(local) if value in psi_set]
        phases.mark("intersect")
        log.info("leader matched %d of %d elements", len(matched), n_real)
        return IntersectionResult(elements=matched, report=_report(cfg, phases))
    except BaseException as exc:
        _abort_neighbors(cfg, f"leader failed: {exc}")
        raise
    finally:
        _close_all(cfg)


def run_middle_assistant(elements: Sequence[bytes], cfg: PartyConfig) -> PartyReport:
    """Relay one wheel hop; learns nothing beyond traffic metrics."""
    if cfg.role is not PartyRole.MIDDLE:
        raise ValueError("run_middle_assistant requires 1 < index < n")
    if cfg.prev is None or cfg.next is None:
        raise ValueError("middle assistant needs prev and next channels")
    params = cfg.params
    phases = _Phases()
    try:
        k = key_share(cfg)
        phases.mark("setup")

        padded, _ = pad_set(elements, params.set_size, cfg.rng)
        di = soprf.build_occupancy(padded, k, params)
        s = ChoiceString.random(params.cols, cfg.rng)
        phases.mark("preprocess")

        # Sender side first so the handshake wave travels the whole ring
        # before any receiver blocks on upstream data.
        rot_out = rot_batch(cfg.rot_mode, "sender", cfg.next, params.cols, params.rows, rng=cfg.rng)
        rot_in = rot_batch(
            cfg.rot_mode, "receiver", cfg.prev, params.cols, params.rows, s=s, rng=cfg.rng
        )
        phases.mark("handshake")

        if cfg.index == 2:
            state = soprf.receive_first_hop(s, rot_in, cfg.prev, params.rows)
        else:
            state = soprf.middle_hop_receive(s, rot_in, cfg.prev, params.rows)
        if cfg.debug_sink is not None:
            cfg.debug_sink[cfg.index] = {"carried": state.c, "occupancy": di.d, "choice": s}
        soprf.middle_hop_send(state, di, rot_out, cfg.next)
        phases.mark("wheel")
        return _report(cfg, phases)
    except BaseException as exc:
        _abort_neighbors(cfg, f"party {cfg.index} failed: {exc}")
        raise
    finally:
        _close_all(cfg)


def run_terminal_assistant(elements: Sequence[bytes], cfg: PartyConfig) -> PartyReport:
    """Receive the final hop and return the shuffled digest set to the leader."""
    if cfg.role is not PartyRole.TERMINAL:
        raise ValueError("run_terminal_assistant requires party index n")
    if cfg.prev is None or cfg.ret is None:
        raise ValueError("terminal assistant needs prev and return channels")
    params = cfg.params
    phases = _Phases()
    try:
        k = key_share(cfg)
        phases.mark("setup")

        padded, _ = pad_set(elements, params.set_size, cfg.rng)
        s = ChoiceString.random(params.cols, cfg.rng)
        phases.mark("preprocess")

        rot_in = rot_batch(
            cfg.rot_mode, "receiver", cfg.prev, params.cols, params.rows, s=s, rng=cfg.rng
        )
        phases.mark("handshake")

        if cfg.index == 2:
            state = soprf.receive_first_hop(s, rot_in, cfg.prev, params.rows)
        else:
            state = soprf.middle_hop_receive(s, rot_in, cfg.prev, params.rows)
        if cfg.debug_sink is not None:
            cfg.debug_sink[cfg.index] = {"carried": state.c, "choice": s}
        phases.mark("wheel")

        values = soprf.eval_oprf(state.c, k, padded, params)
        cfg.rng.shuffle(values)  # the wire order must not leak input order
        cfg.ret.send_frame(MSG_PSI, b"".join(values))
        phases.mark("respond")
        return _report(cfg, phases)
    except BaseException as exc:
        _abort_neighbors(cfg, f"party {cfg.index} failed: {exc}")
        raise
    finally:
        _close_all(cfg)
