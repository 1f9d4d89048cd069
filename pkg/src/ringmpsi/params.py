"""Protocol parameter derivation and validation.

All parties must run the protocol with an identical parameter tuple
(n, N, m, w, d, lambda, sigma, ell1, ell2).  Everything except ``w`` is
either configured directly or a closed-form function of the configuration;
``w`` (the matrix width, equal to the number of oblivious transfers per
ring edge) is the smallest integer for which the masking guarantee holds:

    N * P[Binomial(w, p) <= d-1] <= 2^-sigma,   p = (1 - 1/m)^N.

The left side is the union bound over a party's N set elements of the
event that a foreign element selects fewer than d surviving one-bits in
an occupancy matrix.  The tail is evaluated in log space (log-gamma
binomial coefficients, log-sum-exp accumulation) because p^k underflows
double precision long before k reaches the default d = 128.

Derived parameters serialize to a canonical ``name=value`` text block so
that all n parties can assert byte-identical agreement before running.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

__all__ = [
    "SecurityConfig",
    "ProtocolParams",
    "derive_params",
    "check_w_bound",
    "occupancy_probability",
    "log_binomial_tail",
    "params_to_text",
    "params_from_text",
    "diff_params_text",
    "MAX_W",
]

# Give up deriving w past this point; the configuration is infeasible.
MAX_W = 1 << 20


@dataclass(frozen=True)
class SecurityConfig:
    """Security knobs shared by every party.

    lambda_bits: computational security parameter (key and seed lengths).
    sigma:       statistical security parameter (failure probabilities
                 are bounded by 2^-sigma).
    d:           minimum Hamming weight of surviving one-bits that the
                 masking argument needs; defaults to lambda_bits.
    """

    lambda_bits: int = 128
    sigma: int = 40
    d: int = 128

    def __post_init__(self):
        if self.lambda_bits < 80:
            raise ValueError("lambda_bits must be >= 80")
        if self.lambda_bits % 8 != 0 or self.lambda_bits > 256:
            # Keys, seeds and digests are byte strings; blake2b caps the
            # H1 digest at 64 bytes = 2*256 bits.
            raise ValueError("lambda_bits must be a multiple of 8, <= 256")
        if self.sigma < 30:
            raise ValueError("sigma must be >= 30")
        if self.d < 1:
            raise ValueError("d must be >= 1")


@dataclass(frozen=True)
class ProtocolParams:
    """The full parameter tuple agreed on by all n parties.

    n_parties: number of parties in the ring.
    set_size:  upper bound N on any party's input set; sets are padded
               up to exactly N before the protocol runs.
    rows:      matrix row count m (= set_size, see derive_params).
    cols:      matrix column count w = number of OTs per ring edge.
    h1_bits:   element-digest length ell1 = 2*lambda.
    h2_bits:   output-digest length ell2 = sigma + ceil(2*log2(N)).
    """

    n_parties: int
    set_size: int
    rows: int
    cols: int
    h1_bits: int
    h2_bits: int
    sec: SecurityConfig = SecurityConfig()

    def __post_init__(self):
        if self.n_parties < 2:
            raise ValueError("n_parties must be >= 2")
        if self.set_size < 2:
            raise ValueError("set_size must be >= 2")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        if self.h1_bits < 96:
            # prf_indices consumes a 12-byte digest prefix per element.
            raise ValueError("h1_bits must be >= 96")
        if self.h2_bits < 8:
            raise ValueError("h2_bits must be >= 8")

    @property
    def col_bytes(self) -> int:
        """Bytes per stored matrix column."""
        return (self.rows + 7) // 8

    @property
    def h1_bytes(self) -> int:
        return (self.h1_bits + 7) // 8

    @property
    def h2_bytes(self) -> int:
        return (self.h2_bits + 7) // 8

    @property
    def key_bytes(self) -> int:
        return self.sec.lambda_bits // 8

    def with_h2_bits(self, h2_bits: int) -> "ProtocolParams":
        """Copy with a forced digest width (soundness experiments only)."""
        return replace(self, h2_bits=h2_bits)

    def with_cols(self, cols: int) -> "ProtocolParams":
        """Copy with a forced matrix width (sanity experiments only)."""
        return replace(self, cols=cols)


def occupancy_probability(m: int, set_size: int) -> float:
    """Probability that one fixed matrix cell survives as a one-bit.

    Each of ``set_size`` elements zeroes one uniformly random row per
    column, so a fixed cell stays 1 with probability (1 - 1/m)^set_size.
    Evaluated as exp(set_size * log1p(-1/m)) to stay accurate for large
    exponents.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if set_size < 0:
        raise ValueError("set_size must be >= 0")
    if set_size == 0:
        return 1.0
    if m == 1:
        return 0.0
    return math.exp(set_size * math.log1p(-1.0 / m))


def log_binomial_tail(w: int, d: int, p: float) -> float:
    """Natural log of P[Binomial(w, p) <= d-1].

    Accumulates log C(w,k) + k*log(p) + (w-k)*log(1-p) for k < d via
    log-sum-exp.  Exact to ~1e-12 relative error, verified against
    rational arithmetic in the test suite.
    """
    if w < 0:
        raise ValueError("w must be >= 0")
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0,1)")
    top = min(d - 1, w)
    if top < 0:
        return -math.inf
    if top >= w:
        return 0.0  # the whole distribution
    log_p = math.log(p)
    log_1p = math.log1p(-p)
    lg_w = math.lgamma(w + 1)
    terms = [
        lg_w - math.lgamma(k + 1) - math.lgamma(w - k + 1) + k * log_p + (w - k) * log_1p
        for k in range(top + 1)
    ]
    hi = max(terms)
    return hi + math.log(math.fsum(math.exp(t - hi) for t in terms))


def check_w_bound(w: int, N: int, m: int, sec: SecurityConfig) -> bool:
    """True iff N * P[Binomial(w, p) <= d-1] <= 2^-sigma with p = (1-1/m)^N."""
    if w < 0:
        raise ValueError("w must be >= 0")
    p = occupancy_probability(m, N)
    if p <= 0.0 or p >= 1.0:
        return False  # degenerate occupancy; no w can help
    return math.log(N) + log_binomial_tail(w, sec.d, p) <= -sec.sigma * math.log(2)


def derive_params(N: int, n: int, sec: SecurityConfig = SecurityConfig()) -> ProtocolParams:
    """Derive the agreed parameter tuple for n parties with set bound N.

    m is fixed to N.  w is found by doubling from d until the masking
    bound holds, then binary-searching for the minimal passing width.
    Deterministic: identical inputs give identical outputs.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    if n < 2:
        raise ValueError("n must be >= 2")
    m = N
    ell1 = 2 * sec.lambda_bits
    ell2 = sec.sigma + math.ceil(2 * math.log2(N))

    hi = max(sec.d, 1)
    while not check_w_bound(hi, N, m, sec):
        hi *= 2
        if hi > MAX_W:
            raise ValueError(
                f"no w <= {MAX_W} satisfies the masking bound for "
                f"N={N}, sigma={sec.sigma}, d={sec.d}"
            )
    lo = hi // 2  # check_w_bound(lo) known false (or lo < d)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if check_w_bound(mid, N, m, sec):
            hi = mid
        else:
            lo = mid
    return ProtocolParams(
        n_parties=n, set_size=N, rows=m, cols=hi, h1_bits=ell1, h2_bits=ell2, sec=sec
    )


# Canonical wire names for the agreement text block.
_TEXT_FIELDS = ("N", "d", "ell1", "ell2", "lambda", "m", "n", "sigma", "w")


def params_to_text(params: ProtocolParams) -> str:
    """Canonical text block: one ``name=value`` line per field, sorted.

    Byte-identical across parties iff the parameter tuples agree; used
    as the session-header payload for the agreement check.
    """
    values = {
        "N": params.set_size,
        "d": params.sec.d,
        "ell1": params.h1_bits,
        "ell2": params.h2_bits,
        "lambda": params.sec.lambda_bits,
        "m": params.rows,
        "n": params.n_parties,
        "sigma": params.sec.sigma,
        "w": params.cols,
    }
    return "".join(f"{name}={values[name]}\n" for name in sorted(values))


def params_from_text(text: str) -> ProtocolParams:
    """Parse a canonical text block back into ProtocolParams."""
    fields: dict[str, int] = {}
    for line in text.splitlines():
        if not line:
            continue
        name, _, value = line.partition("=")
        fields[name] = int(value)
    missing = set(_TEXT_FIELDS) - set(fields)
    if missing:
        raise ValueError(f"params text missing fields: {sorted(missing)}")
    sec = SecurityConfig(lambda_bits=fields["lambda"], sigma=fields["sigma"], d=fields["d"])
    return ProtocolParams(
        n_parties=fields["n"],
        set_size=fields["N"],
        rows=fields["m"],
        cols=fields["w"],
        h1_bits=fields["ell1"],
        h2_bits=fields["ell2"],
        sec=sec,
    )


def diff_params_text(mine: str, theirs: str) -> str | None:
    """Name the first differing field between two canonical blocks.

    Returns None when the blocks are byte-identical.
    """
    if mine == theirs:
        return None
    own = dict(line.split("=", 1) for line in mine.splitlines() if line)
    other = dict(line.split("=", 1) for line in theirs.splitlines() if line)
    for name in sorted(set(own) | set(other)):
        if own.get(name) != other.get(name):
            return name
    return "format"
