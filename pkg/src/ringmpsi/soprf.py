"""Occupancy-matrix construction, the ring's OT hops, and OPRF evaluation.

One intersection session moves a single m x w matrix once around the
ring.  The leader seeds it with a random base matrix; every assistant
obliviously either keeps each column or folds in its own occupancy
column, so a matrix cell survives the full pass unchanged iff every
party's occupancy matrix left it alone.  Sampling one bit per column at
an element's PRF-selected rows therefore yields equal digests at the
leader and the terminal assistant exactly for elements every party holds.

Hop-local invariant (checked in dealer-mode tests): the matrix leaving a
party equals mux(c, c ^ d, s_next) where c is the matrix it received, d
its occupancy matrix and s_next the downstream choice string.
"""

from __future__ import annotations

import random as _random
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import bitmatrix
from .bitmatrix import BitMatrix, ChoiceString, mask_columns, mux, xor
from .crypto import OprfValue, PrfKey, RotBatch, h1, h2, prf_indices_batch, rot_batch
from .params import ProtocolParams
from .transport import MSG_DELTA, MSG_GAMMA_DELTA, Channel

__all__ = [
    "OccupancyMatrix",
    "WheelState",
    "build_occupancy",
    "occupancy_from_indices",
    "leader_first_hop",
    "receive_first_hop",
    "middle_hop_send",
    "middle_hop_receive",
    "eval_oprf",
]


@dataclass
class OccupancyMatrix:
    """All-ones m x w matrix with zeros at each set element's positions."""

    d: BitMatrix


@dataclass
class WheelState:
    """A party's received OT-result matrix and the choice string used."""

    c: BitMatrix
    s: ChoiceString


def occupancy_from_indices(indices: np.ndarray, params: ProtocolParams) -> OccupancyMatrix:
    """Occupancy matrix from precomputed index vectors, one row per element.

    Zeroing is idempotent, so duplicate index vectors are harmless.
    """
    d = bitmatrix.filled(params.rows, params.cols, 1)
    if indices.size:
        cols = np.arange(params.cols)
        keep = ~(np.uint8(1) << (indices & 7).astype(np.uint8))
        for row, k in zip(indices, keep):
            d.data[cols, row >> 3] &= k
    return OccupancyMatrix(d)


def build_occupancy(elements: Sequence[bytes], k: PrfKey, params: ProtocolParams) -> OccupancyMatrix:
    """Build a party's occupancy matrix from its (padded) element list."""
    if len(elements) > params.set_size:
        raise ValueError(f"set size {len(elements)} exceeds bound {params.set_size}")
    digests = [h1(x, params) for x in elements]
    return occupancy_from_indices(prf_indices_batch(k, digests, params), params)


def _as_sender_batch(
    rot: Union[RotBatch, str], channel: Channel, w: int, rows: int, rng
) -> RotBatch:
    if isinstance(rot, RotBatch):
        if not rot.is_sender:
            raise ValueError("expected a sender-side ROT batch")
        return rot
    return rot_batch(rot, "sender", channel, w, rows, rng=rng)


def _as_receiver_batch(
    rot: Union[RotBatch, str],
    channel: Channel,
    s: ChoiceString,
    rows: int,
    rng: Optional[_random.Random],
) -> RotBatch:
    if isinstance(rot, RotBatch):
        if rot.r is None:
            raise ValueError("expected a receiver-side ROT batch")
        if rot.s is not None and s is not None and not (rot.s == s):
            raise ValueError("choice string does not match the ROT batch")
        return rot
    return rot_batch(rot, "receiver", channel, len(s), rows, s=s, rng=rng)


def leader_first_hop(
    d1: OccupancyMatrix,
    rot: Union[RotBatch, str],
    channel: Channel,
    rng=None,
) -> BitMatrix:
    """Leader's single send: base matrix from the OT pads, one mask matrix out.

    The leader adopts the pad matrix r0 as its base matrix, so only one
    combined mask (r1 ^ base ^ occupancy) crosses the wire -- half the
    traffic of a middle hop.  Returns the base matrix for the final
    intersection step.  `rot` is either a completed sender-side batch or
    a provider mode to run here.
    """
    rows, cols = d1.d.rows, d1.d.cols
    batch = _as_sender_batch(rot, channel, cols, rows, rng)
    base = batch.r0
    b = xor(base, d1.d)
    delta = xor(b, batch.r1)
    channel.send_frame(MSG_DELTA, delta.to_bytes())
    return base


def receive_first_hop(
    s: ChoiceString,
    rot: Union[RotBatch, str],
    channel: Channel,
    rows: int,
    rng=None,
) -> WheelState:
    """Second party's receive: c = r ^ (delta masked to chosen columns).

    Column j of the result equals the leader's base column when s[j]=0
    and base ^ occupancy when s[j]=1, by the OT guarantee.
    """
    batch = _as_receiver_batch(rot, channel, s, rows, rng)
    _, payload = channel.recv_frame(MSG_DELTA)
    delta = BitMatrix.from_bytes(rows, len(s), payload)
    c = xor(batch.r, mask_columns(delta, s))
    return WheelState(c=c, s=s)


def middle_hop_send(
    state: WheelState,
    di: OccupancyMatrix,
    rot: Union[RotBatch, str],
    channel: Channel,
    rng=None,
) -> None:
    """Forward the ring matrix one hop: both masked alternatives in one frame.

    gamma = r0 ^ c carries the matrix unchanged; delta = r1 ^ c ^ d
    carries it with this party's occupancy folded in.  The downstream
    choice string picks per column which one decodes.
    """
    c = state.c
    batch = _as_sender_batch(rot, channel, c.cols, c.rows, rng)
    e = xor(c, di.d)
    gamma = xor(batch.r0, c)
    delta = xor(batch.r1, e)
    channel.send_frame(MSG_GAMMA_DELTA, gamma.to_bytes() + delta.to_bytes())


def middle_hop_receive(
    s: ChoiceString,
    rot: Union[RotBatch, str],
    channel: Channel,
    rows: int,
    rng=None,
) -> WheelState:
    """Receive a middle hop: c = r ^ mux(gamma, delta, s)."""
    batch = _as_receiver_batch(rot, channel, s, rows, rng)
    _, payload = channel.recv_frame(MSG_GAMMA_DELTA)
    half = len(s) * ((rows + 7) // 8)
    if len(payload) != 2 * half:
        raise ValueError(f"expected two {half}-byte matrices, got {len(payload)} bytes")
    gamma = BitMatrix.from_bytes(rows, len(s), payload[:half])
    delta = BitMatrix.from_bytes(rows, len(s), payload[half:])
    c = xor(batch.r, mux(gamma, delta, s))
    return WheelState(c=c, s=s)


def eval_oprf(
    matrix: BitMatrix,
    k: PrfKey,
    elements: Sequence[bytes],
    params: ProtocolParams,
    indices: Optional[np.ndarray] = None,
) -> list[OprfValue]:
    """Per-element digest of the matrix bits at the element's positions.

    Output order matches input order.  `indices` may carry precomputed
    index vectors (one row per element) to skip the PRF pass.
    """
    if indices is None:
        digests = [h1(x, params) for x in elements]
        indices = prf_indices_batch(k, digests, params)
    return [h2(bitmatrix.gather(matrix, v), params) for v in indices]
