"""Hashing, index-deriving PRF, PRG expansion, and random-OT providers.

Primitive map (all fixed by checked-in test vectors so independent
implementations can interoperate):

  h1            blake2b over tag byte 0x01 + element, 2*lambda-bit digest
  h2            blake2b over tag byte 0x02 + packed column bits, ell2 bits
  prf_indices   AES-128-CTR keyed by the shared key; per element the
                counter blocks are digest[:12] || big-endian block index,
                so batches of elements encrypt as one ECB pass; each
                64-bit block reduces mod m (bias <= m / 2^64 < 2^-40 for
                every supported m)
  prg_expand    AES-128-CTR keyed by blake2b(tag 0x03 + seed), stretching
                a lambda-bit seed into an m-bit column

Two random-OT providers ship behind one call surface:

  "dealer"  the sender picks a seed and hands it to the receiver in the
            clear; both expand it into (r0, r1) pad matrices and the
            receiver keeps its chosen columns.  Explicitly NOT secure;
            it exists for tests and the simulator, where the shared seed
            doubles as a white-box leak of the sender state.
  "seedot"  w parallel two-message 1-out-of-2 OTs on 128-bit seeds over
            the 2048-bit MODP group (sender publishes A = g^a; receiver
            answers B_j = g^b or A*g^b depending on its choice bit; each
            side hashes the shared secret into a seed), then each seed is
            prg_expand-ed to an m-bit column.
"""

from __future__ import annotations

import hashlib
import random as _random
from dataclasses import dataclass
from typing import Optional

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .bitmatrix import BitMatrix, ChoiceString, IndexVector, mux
from .params import ProtocolParams
from .transport import MSG_OT, Channel

__all__ = [
    "PrfKey",
    "OprfValue",
    "RotBatch",
    "make_rng",
    "derive_party_seed",
    "h1",
    "h2",
    "prf_indices",
    "prf_indices_batch",
    "prg_expand",
    "rot_batch",
    "ROT_MODES",
]

# An OprfValue is a ceil(ell2/8)-byte string with zero pad bits.
OprfValue = bytes

_TAG_H1 = b"\x01"
_TAG_H2 = b"\x02"
_TAG_PRG = b"\x03"
_TAG_DEALER = b"\x04"
_TAG_OT_SEED = b"\x05"

SEED_BYTES = 16  # OT-transferred seeds feed AES-128


@dataclass(frozen=True)
class PrfKey:
    """The lambda-bit PRF key shared by all parties."""

    key: bytes

    def __post_init__(self):
        if len(self.key) < 16:
            raise ValueError("key must be at least 128 bits")


def make_rng(seed: Optional[int]) -> _random.Random:
    """Seedable randomness source; system entropy when seed is None."""
    if seed is None:
        return _random.SystemRandom()
    return _random.Random(seed)


def derive_party_seed(master_seed: Optional[int], index: int) -> Optional[int]:
    """Stable per-party sub-seed so one session seed drives all parties."""
    if master_seed is None:
        return None
    raw = master_seed.to_bytes(8, "little", signed=True) + index.to_bytes(4, "little")
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


def h1(element: bytes, params: ProtocolParams) -> bytes:
    """Collision-resistant element digest of ell1 = 2*lambda bits.

    Elements are hashed as raw bytes with no canonicalization; callers
    normalize their encodings before the protocol.
    """
    return hashlib.blake2b(_TAG_H1 + element, digest_size=params.h1_bytes).digest()


def h2(packed_bits: bytes, params: ProtocolParams) -> OprfValue:
    """ell2-bit digest of a packed w-bit column-sample string.

    Input must be the ceil(w/8)-byte LSB-first packing produced by
    gather(); output pad bits above ell2 are cleared.
    """
    expected = (params.cols + 7) // 8
    if len(packed_bits) != expected:
        raise ValueError(f"h2 input must be {expected} bytes ({params.cols} bits)")
    digest = bytearray(hashlib.blake2b(_TAG_H2 + packed_bits, digest_size=params.h2_bytes).digest())
    rem = params.h2_bits % 8
    if rem:
        digest[-1] &= (1 << rem) - 1
    return bytes(digest)


def _aes_key(key: bytes) -> bytes:
    if len(key) in (16, 24, 32):
        return key
    return hashlib.blake2b(key, digest_size=16).digest()


def prf_indices_batch(k: PrfKey, digests: list[bytes], params: ProtocolParams) -> np.ndarray:
    """Index vectors for many element digests in one AES pass.

    Returns an int64 array of shape (len(digests), w) with entries in
    [0, rows).  Row i equals prf_indices(k, digests[i], params).
    """
    n = len(digests)
    w = params.cols
    if n == 0:
        return np.empty((0, w), dtype=np.int64)
    nblocks = (w * 8 + 15) // 16
    blocks = np.zeros((n, nblocks, 16), dtype=np.uint8)
    prefixes = np.frombuffer(b"".join(d[:12] for d in digests), dtype=np.uint8).reshape(n, 12)
    blocks[:, :, :12] = prefixes[:, None, :]
    counters = np.arange(nblocks, dtype=">u4").view(np.uint8).reshape(nblocks, 4)
    blocks[:, :, 12:] = counters[None, :, :]
    enc = Cipher(algorithms.AES(_aes_key(k.key)), modes.ECB()).encryptor()
    stream = np.frombuffer(enc.update(blocks.tobytes()), dtype=np.uint8)
    words = stream.reshape(n, nblocks * 16)[:, : w * 8].reshape(n, w, 8)
    values = np.ascontiguousarray(words).view("<u8").reshape(n, w)
    return (values % np.uint64(params.rows)).astype(np.int64)


def prf_indices(k: PrfKey, digest: bytes, params: ProtocolParams) -> IndexVector:
    """The column-row selector v with v[j] = PRF block j mod rows."""
    if len(digest) != params.h1_bytes:
        raise ValueError(f"digest must be {params.h1_bytes} bytes")
    return prf_indices_batch(k, [digest], params)[0]


def prg_expand(seed: bytes, nbits: int) -> bytes:
    """Stretch a seed into ceil(nbits/8) pseudorandom bytes, pad bits zero."""
    nbytes = (nbits + 7) // 8
    if nbytes == 0:
        return b""
    key = hashlib.blake2b(_TAG_PRG + seed, digest_size=16).digest()
    enc = Cipher(algorithms.AES(key), modes.CTR(bytes(16))).encryptor()
    out = bytearray(enc.update(bytes(nbytes)))
    rem = nbits % 8
    if rem:
        out[-1] &= (1 << rem) - 1
    return bytes(out)


def _dealer_expand(seed: bytes, rows: int, cols: int) -> tuple[BitMatrix, BitMatrix]:
    """Both pad matrices (r0, r1) from one dealer seed, in one AES pass."""
    cb = (rows + 7) // 8
    key = hashlib.blake2b(_TAG_DEALER + seed, digest_size=16).digest()
    enc = Cipher(algorithms.AES(key), modes.CTR(bytes(16))).encryptor()
    stream = np.frombuffer(enc.update(bytes(2 * cols * cb)), dtype=np.uint8)
    pair = []
    for half in (stream[: cols * cb], stream[cols * cb :]):
        mat = BitMatrix(rows, cols, half.reshape(cols, cb).copy())
        mat.data[:, -1] &= np.uint8(mat.pad_mask)
        pair.append(mat)
    return pair[0], pair[1]


@dataclass
class RotBatch:
    """Result of w random OTs with m-bit messages.

    Sender side holds the pad matrices (r0, r1); receiver side holds the
    chosen matrix r and the choice string s, with column j of r equal to
    column j of r0 or r1 according to s[j].  w=0 yields an empty batch
    (all matrix fields None).
    """

    r0: Optional[BitMatrix] = None
    r1: Optional[BitMatrix] = None
    r: Optional[BitMatrix] = None
    s: Optional[ChoiceString] = None
    dealer_seed: Optional[bytes] = None  # dealer mode only; leaks sender state

    @property
    def is_sender(self) -> bool:
        return self.r0 is not None or (self.r is None and self.s is None)


ROT_MODES = ("dealer", "seedot")

# RFC 3526 group 14: 2048-bit MODP prime with generator 2.
_MODP_PRIME = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)
_MODP_G = 2
_MODP_Q = (_MODP_PRIME - 1) // 2
OT_ELEM_BYTES = 256


def _elem_bytes(x: int) -> bytes:
    return x.to_bytes(OT_ELEM_BYTES, "big")


def _ot_seed(j: int, a_pub: bytes, b_pub: bytes, shared: int) -> bytes:
    msg = _TAG_OT_SEED + j.to_bytes(4, "little") + a_pub + b_pub + _elem_bytes(shared)
    return hashlib.blake2b(msg, digest_size=SEED_BYTES).digest()


def _seedot_send(channel: Channel, w: int, rows: int, rng) -> RotBatch:
    a = rng.randrange(1, _MODP_Q)
    a_pub_int = pow(_MODP_G, a, _MODP_PRIME)
    a_pub = _elem_bytes(a_pub_int)
    channel.send_frame(MSG_OT, a_pub)
    _, payload = channel.recv_frame(MSG_OT)
    if len(payload) != w * OT_ELEM_BYTES:
        raise ValueError(f"expected {w} OT responses, got {len(payload)} bytes")
    if w == 0:
        return RotBatch()
    a_inv = pow(a_pub_int, _MODP_PRIME - 2, _MODP_PRIME)
    cb = (rows + 7) // 8
    data0 = np.empty((w, cb), dtype=np.uint8)
    data1 = np.empty((w, cb), dtype=np.uint8)
    for j in range(w):
        b_pub = payload[j * OT_ELEM_BYTES : (j + 1) * OT_ELEM_BYTES]
        b_int = int.from_bytes(b_pub, "big")
        if not 1 < b_int < _MODP_PRIME:
            raise ValueError("OT response outside the group")
        shared0 = pow(b_int, a, _MODP_PRIME)
        shared1 = pow(b_int * a_inv % _MODP_PRIME, a, _MODP_PRIME)
        col0 = prg_expand(_ot_seed(j, a_pub, b_pub, shared0), rows)
        col1 = prg_expand(_ot_seed(j, a_pub, b_pub, shared1), rows)
        data0[j] = np.frombuffer(col0, dtype=np.uint8)
        data1[j] = np.frombuffer(col1, dtype=np.uint8)
    return RotBatch(r0=BitMatrix(rows, w, data0), r1=BitMatrix(rows, w, data1))


def _seedot_recv(channel: Channel, s: ChoiceString, rows: int, rng) -> RotBatch:
    _, a_pub = channel.recv_frame(MSG_OT)
    if len(a_pub) != OT_ELEM_BYTES:
        raise ValueError("bad OT offer size")
    a_int = int.from_bytes(a_pub, "big")
    if not 1 < a_int < _MODP_PRIME:
        raise ValueError("OT offer outside the group")
    w = len(s)
    cb = (rows + 7) // 8
    exps = [rng.randrange(1, _MODP_Q) for _ in range(w)]
    response = bytearray()
    for j, b in enumerate(exps):
        b_pub_int = pow(_MODP_G, b, _MODP_PRIME)
        if s[j]:
            b_pub_int = b_pub_int * a_int % _MODP_PRIME
        response += _elem_bytes(b_pub_int)
    channel.send_frame(MSG_OT, bytes(response))
    data = np.empty((w, cb), dtype=np.uint8)
    for j, b in enumerate(exps):
        b_pub = bytes(response[j * OT_ELEM_BYTES : (j + 1) * OT_ELEM_BYTES])
        shared = pow(a_int, b, _MODP_PRIME)
        data[j] = np.frombuffer(prg_expand(_ot_seed(j, a_pub, b_pub, shared), rows), dtype=np.uint8)
    return RotBatch(r=BitMatrix(rows, w, data), s=s)


def _dealer_send(channel: Channel, w: int, rows: int, rng) -> RotBatch:
    seed = rng.randbytes(SEED_BYTES)
    channel.send_frame(MSG_OT, seed)
    if w == 0:
        return RotBatch(dealer_seed=seed)
    r0, r1 = _dealer_expand(seed, rows, w)
    return RotBatch(r0=r0, r1=r1, dealer_seed=seed)


def _dealer_recv(channel: Channel, s: ChoiceString, rows: int) -> RotBatch:
    _, seed = channel.recv_frame(MSG_OT)
    if len(seed) != SEED_BYTES:
        raise ValueError("bad dealer seed size")
    r0, r1 = _dealer_expand(seed, rows, len(s))
    return RotBatch(r=mux(r0, r1, s), s=s, dealer_seed=seed)


def rot_batch(
    mode: str,
    role: str,
    channel: Channel,
    w: int,
    rows: int,
    s: Optional[ChoiceString] = None,
    rng: Optional[_random.Random] = None,
) -> RotBatch:
    """Run one batch of w random OTs with m-bit messages over `channel`.

    The sender supplies nothing and learns the pad matrices (r0, r1); the
    receiver supplies the choice string s (|s| = w) and learns r with
    r_j = column j of r(s[j]).  mode selects the provider ("dealer" or
    "seedot").  The sender must pass rng; the receiver needs it only in
    seedot mode.
    """
    if mode not in ROT_MODES:
        raise ValueError(f"unknown ROT mode {mode!r}")
    if role == "sender":
        if s is not None:
            raise ValueError("sender inputs nothing")
        if rng is None:
            raise ValueError("sender needs an rng")
        if mode == "dealer":
            return _dealer_send(channel, w, rows, rng)
        return _seedot_send(channel, w, rows, rng)
    if role == "receiver":
        if w and (s is None or len(s) != w):
            raise ValueError("receiver must supply a w-bit choice string")
        if mode == "dealer":
            if w == 0:
                _, seed = channel.recv_frame(MSG_OT)
                return RotBatch(dealer_seed=seed)
            return _dealer_recv(channel, s, rows)
        if w == 0:
            _, _ = channel.recv_frame(MSG_OT)
            channel.send_frame(MSG_OT, b"")
            return RotBatch()
        if rng is None:
            raise ValueError("seedot receiver needs an rng")
        return _seedot_recv(channel, s, rows, rng)
    raise ValueError(f"unknown role {role!r}")
