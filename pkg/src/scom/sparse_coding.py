"""Device-side gradient codec.

A real gradient is packed into a complex vector, combined with the device's
error-feedback memory, top-k sparsified, normalised with a shared random sign
flip, compressed by a row-subsampled unitary DFT and finally cut into
``N_S`` parallel streams of ``K`` channel uses each.  The server side needs
the inverse pieces: flattening the post-processed streams and rescaling the
recovered normalised gradient back to a real vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CodecConfig",
    "CompressionOperator",
    "DeviceCodecState",
    "DegenerateGradientError",
    "EncodedGradient",
    "accumulate_sparsify",
    "build_compressor",
    "channel_uses",
    "complexify",
    "compressed_length",
    "decomplexify",
    "encode_gradient",
    "flatten_streams",
    "make_flip_vector",
    "normalize",
    "pad_even",
    "rescale_output",
    "reshape_streams",
    "sparsify_count",
]


class DegenerateGradientError(ValueError):
    """Raised when a sparsified gradient is identically zero.

    The device has nothing to send this round; callers skip its transmission
    and count it with ``sigma = 0``.
    """


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def compressed_length(model_dim: int, kappa: float) -> int:
    """Length ``C`` of the compressed vector for a real model of size ``model_dim``."""
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"compression ratio must lie in (0, 1], got {kappa}")
    half = (model_dim + model_dim % 2) // 2
    return min(half, max(1, _round_half_up(kappa * half)))


def channel_uses(model_dim: int, kappa: float, n_streams: int) -> int:
    """Number of channel uses ``K = ceil(C / N_S)``."""
    if n_streams < 1:
        raise ValueError("need at least one stream")
    return -(-compressed_length(model_dim, kappa) // n_streams)


def sparsify_count(half_dim: int, sparsity: float) -> int:
    """Entries kept by top-k sparsification, ``max(1, round(lambda * D/2))``."""
    if not 0.0 < sparsity <= 1.0:
        raise ValueError(f"sparsity ratio must lie in (0, 1], got {sparsity}")
    return min(half_dim, max(1, _round_half_up(sparsity * half_dim)))


@dataclass(frozen=True)
class CodecConfig:
    model_dim: int
    sparsity_ratio: float
    compression_ratio: float
    streams: int
    shared_seed: int = 0

    def __post_init__(self):
        if self.model_dim < 2:
            raise ValueError("model_dim must be at least 2")
        if self.streams < 1:
            raise ValueError("streams must be positive")
        sparsify_count(self.half_dim, self.sparsity_ratio)
        compressed_length(self.model_dim, self.compression_ratio)

    @property
    def padded_dim(self) -> int:
        return self.model_dim + self.model_dim % 2

    @property
    def half_dim(self) -> int:
        return self.padded_dim // 2

    @property
    def compressed_len(self) -> int:
        return compressed_length(self.model_dim, self.compression_ratio)

    @property
    def channel_uses(self) -> int:
        return channel_uses(self.model_dim, self.compression_ratio, self.streams)


# ---------------------------------------------------------------------------
# complexification


def pad_even(g: np.ndarray) -> np.ndarray:
    """Append one trailing zero when the length is odd."""
    g = np.asarray(g, dtype=float)
    if g.size % 2:
        return np.concatenate([g, [0.0]])
    return g


def complexify(g: np.ndarray) -> np.ndarray:
    """Pack a real vector of even length ``D`` into ``D/2`` complex entries.

    The first half supplies the real parts and the second half the
    imaginary parts, e.g. ``[1, 2, 3, 4] -> [1+3j, 2+4j]``.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 1 or g.size % 2:
        raise ValueError(f"complexify needs an even-length 1-D vector, got shape {g.shape}")
    half = g.size // 2
    return g[:half] + 1j * g[half:]


def decomplexify(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([x.real, x.imag]).astype(float)


# ---------------------------------------------------------------------------
# error feedback and sparsification


@dataclass
class DeviceCodecState:
    """Error-feedback memory of one device, mutated once per round."""

    residual: np.ndarray
    last_scale: float = 0.0

    @classmethod
    def zeros(cls, half_dim: int) -> "DeviceCodecState":
        return cls(residual=np.zeros(half_dim, dtype=complex))


def accumulate_sparsify(g_cx: np.ndarray, state: DeviceCodecState, sparsity: float):
    """Add the residual, keep the top-k magnitudes and return the new state.

    Ties in magnitude go to the lower index.  The returned state satisfies
    ``g_sp + new.residual == g_cx + state.residual`` bit-for-bit: kept entries
    are copied and dropped entries move to the residual unchanged.
    """
    g_cx = np.asarray(g_cx, dtype=complex)
    if state.residual.shape != g_cx.shape:
        raise ValueError("residual length does not match gradient length")
    k = sparsify_count(g_cx.size, sparsity)
    g_ac = g_cx + state.residual
    # stable sort on -|x| keeps the lowest index first among equal magnitudes
    keep = np.argsort(-np.abs(g_ac), kind="stable")[:k]
    mask = np.zeros(g_ac.size, dtype=bool)
    mask[keep] = True
    g_sp = np.where(mask, g_ac, 0.0)
    residual = np.where(mask, 0.0, g_ac)
    return g_sp, DeviceCodecState(residual=residual, last_scale=state.last_scale)


def make_flip_vector(seed: int, half_dim: int) -> np.ndarray:
    """Shared random +-1 vector derived from the run's codec seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    return rng.choice(np.array([-1.0, 1.0]), size=half_dim)


def normalize(g_sp: np.ndarray, flips: np.ndarray):
    """Sign-flip and scale to unit empirical second moment.

    Returns ``(g_no, sigma)`` with ``sigma = mean(|g_sp|**2)``.
    """
    g_sp = np.asarray(g_sp, dtype=complex)
    if g_sp.shape != np.shape(flips):
        raise ValueError("flip vector length does not match gradient length")
    sigma = float(np.mean(np.abs(g_sp) ** 2))
    if sigma == 0.0:
        raise DegenerateGradientError("sparsified gradient is all zeros")
    return g_sp * flips / math.sqrt(sigma), sigma


# ---------------------------------------------------------------------------
# partial DFT compression


@dataclass(frozen=True)
class CompressionOperator:
    """Row-subsampled unitary DFT ``A = S Xi`` of size ``C x D/2``.

    ``rows`` holds 0-based DFT row indices in selection order.  Both the
    forward map and its adjoint run through FFTs.
    """

    half_dim: int
    rows: np.ndarray = field(repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.ndim != 1 or rows.size == 0:
            raise ValueError("need a non-empty 1-D row selection")
        if rows.min() < 0 or rows.max() >= self.half_dim:
            raise ValueError("row index out of range")
        if np.unique(rows).size != rows.size:
            raise ValueError("selected rows must be distinct")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def compressed_len(self) -> int:
        return self.rows.size

    @property
    def kappa(self) -> float:
        return self.rows.size / self.half_dim

    def compress(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != self.half_dim:
            raise ValueError(f"expected length {self.half_dim}, got {x.shape[-1]}")
        return np.fft.fft(x, norm="ortho")[..., self.rows]

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r)
        if r.shape[-1] != self.rows.size:
            raise ValueError(f"expected length {self.rows.size}, got {r.shape[-1]}")
        full = np.zeros(r.shape[:-1] + (self.half_dim,), dtype=complex)
        full[..., self.rows] = r
        return np.fft.ifft(full, norm="ortho")

    def dense(self) -> np.ndarray:
        """Explicit ``C x D/2`` matrix, for testing only."""
        n = self.half_dim
        idx = np.arange(n)
        return np.exp(-2j * np.pi * np.outer(self.rows, idx) / n) / math.sqrt(n)


def build_compressor(shared_seed: int, model_dim: int, kappa: float) -> CompressionOperator:
    half = (model_dim + model_dim % 2) // 2
    c = compressed_length(model_dim, kappa)
    rng = np.random.default_rng(np.random.SeedSequence(shared_seed).spawn(2)[0])
    rows = rng.choice(half, size=c, replace=False)
    return CompressionOperator(half_dim=half, rows=rows)


# ---------------------------------------------------------------------------
# stream framing


def reshape_streams(g_cp: np.ndarray, n_streams: int, k: int) -> np.ndarray:
    """Cut a length-``C`` vector into an ``N_S x K`` frame, zero-padding the tail."""
    g_cp = np.asarray(g_cp)
    if n_streams * k < g_cp.size:
        raise ValueError(f"frame {n_streams}x{k} cannot hold {g_cp.size} symbols")
    frame = np.zeros(n_streams * k, dtype=complex)
    frame[: g_cp.size] = g_cp
    return frame.reshape(n_streams, k)


def flatten_streams(frame: np.ndarray) -> np.ndarray:
    """``vec(frame.T)``: concatenate the rows of an ``N_S x K`` frame."""
    return np.asarray(frame).reshape(-1)


def rescale_output(g_no_hat: np.ndarray, flips: np.ndarray, sigma_bar: float) -> np.ndarray:
    if sigma_bar < 0:
        raise ValueError("sigma_bar must be non-negative")
    g_no_hat = np.asarray(g_no_hat)
    if g_no_hat.shape != np.shape(flips):
        raise ValueError("flip vector length does not match estimate length")
    return decomplexify(math.sqrt(sigma_bar) * g_no_hat * flips)


# ---------------------------------------------------------------------------
# one device, one round


@dataclass
class EncodedGradient:
    frame: np.ndarray
    sigma: float
    g_sp: np.ndarray
    g_no: np.ndarray


def encode_gradient(g: np.ndarray, state: DeviceCodecState, config: CodecConfig,
                    op: CompressionOperator, flips: np.ndarray):
    """Run the full device pipeline on a real gradient.

    Returns ``(encoded, new_state)``; ``encoded`` is ``None`` when the
    sparsified gradient vanishes and the device stays silent.
    """
    g_cx = complexify(pad_even(g))
    g_sp, new_state = accumulate_sparsify(g_cx, state, config.sparsity_ratio)
    try:
        g_no, sigma = normalize(g_sp, flips)
    except DegenerateGradientError:
        new_state.last_scale = 0.0
        return None, new_state
    new_state.last_scale = sigma
    frame = reshape_streams(op.compress(g_no), config.streams, config.channel_uses)
    return EncodedGradient(frame=frame, sigma=sigma, g_sp=g_sp, g_no=g_no), new_state
