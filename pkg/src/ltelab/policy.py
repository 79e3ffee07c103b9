"""Fixed-window MLP policy with exact log-probs, entropies and gradients.

The next-token distribution depends only on the ``W`` most recent context
tokens (prompt followed by the response so far).  Each window slot is
embedded, the slots feed one ``tanh`` hidden layer, and a softmax head
produces the next-token distribution.  Everything is float64.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _backend
from .env import END, PAD

CHECKPOINT_MAGIC = b"LTEPOLv\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIQI")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyShape:
    window: int
    embed: int
    vocab: int
    hidden: int

    def __post_init__(self):
        for name in ("window", "embed", "vocab", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def n_params(self) -> int:
        W, d, V, H = self.dims
        return V * d + W * d * H + H + H * V + V

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.window, self.embed, self.vocab, self.hidden


@dataclass(eq=False)
class PolicyParams:
    theta: np.ndarray
    shape: PolicyShape
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 1 or self.theta.size != self.shape.n_params:
            raise ValueError(
                f"parameter vector has {self.theta.size} entries, shape implies {self.shape.n_params}"
            )

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta.copy(), self.shape, self.version)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(theta, self.shape, self.version)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)))

    def blocks(self):
        """Views ``(E, W1, b1, W2, b2)`` into ``theta``."""
        return _backend.python_kernels.unpack(self.theta, *self.shape.dims)


def zeros(shape: PolicyShape) -> PolicyParams:
    return PolicyParams(np.zeros(shape.n_params), shape)


def init_params(shape: PolicyShape, seed: int, scale: float = 1.0) -> PolicyParams:
    """Gaussian init: unit embeddings, fan-in scaled input layer, small head."""
    rng = np.random.default_rng(seed)
    params = zeros(shape)
    E, W1, b1, W2, b2 = params.blocks()
    W, d, V, H = shape.dims
    E[:] = rng.normal(size=E.shape) * scale
    W1[:] = rng.normal(size=W1.shape) * scale / np.sqrt(W * d)
    W2[:] = rng.normal(size=W2.shape) * 0.1 * scale / np.sqrt(H)
    return params


@dataclass(eq=False)
class Rollout:
    response_tokens: np.ndarray
    old_logprobs: np.ndarray
    truncated: bool
    prompt_used: tuple[int, ...]
    hinted: bool = False
    answer: Optional[int] = None
    reward: int = 0

    def __len__(self) -> int:
        return len(self.response_tokens)


@dataclass(frozen=True)
class SampleConfig:
    temperature: float = 1.0
    max_len: int = 64
    top_k: int = 0
    top_p: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")


def _kern(backend):
    return _backend.get(backend)


def _check_tokens(tokens: np.ndarray, vocab: int):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ValueError(f"token ids must lie in [0, {vocab})")


def windows_for(prompt: Sequence[int], response: Sequence[int], window: int) -> np.ndarray:
    """Context windows ``(len(response), W)`` used to predict each response token."""
    prompt = np.asarray(prompt, dtype=np.int64)
    response = np.asarray(response, dtype=np.int64)
    seq = np.concatenate([np.full(window, PAD, dtype=np.int64), prompt, response[:-1]])
    start = len(prompt)
    view = np.lib.stride_tricks.sliding_window_view(seq, window)
    return np.ascontiguousarray(view[start:start + len(response)])


def sample_arrays(params: PolicyParams, prompts: Sequence[Sequence[int]], config: SampleConfig,
                  rng: np.random.Generator, backend: Optional[str] = None):
    """Raw sampler output ``(tokens (N, L_max), lengths (N,), logprobs (N, L_max))``."""
    if not params.is_finite():
        raise ValueError("cannot sample from non-finite parameters")
    N = len(prompts)
    flat = np.concatenate([np.asarray(p, dtype=np.int64) for p in prompts])
    _check_tokens(flat, params.shape.vocab)
    offsets = np.zeros(N + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(p) for p in prompts])
    uniforms = rng.random((N, config.max_len))
    return _kern(backend).sample(
        params.theta, *params.shape.dims, flat, offsets, uniforms,
        float(config.temperature), int(config.top_k), float(config.top_p), END,
    )


def sample_batch(
    params: PolicyParams,
    prompts: Sequence[Sequence[int]],
    config: SampleConfig,
    rng: np.random.Generator,
    hinted: Sequence[bool] | bool = False,
    backend: Optional[str] = None,
) -> list[Rollout]:
    """Sample one rollout per prompt.  Log-probs are recorded at temperature 1."""
    N = len(prompts)
    if N == 0:
        return []
    tokens, lengths, logp = sample_arrays(params, prompts, config, rng, backend)
    if isinstance(hinted, bool):
        hinted = [hinted] * N
    out = []
    for n in range(N):
        L = int(lengths[n])
        resp = tokens[n, :L].copy()
        out.append(
            Rollout(
                response_tokens=resp,
                old_logprobs=logp[n, :L].copy(),
                truncated=bool(L == config.max_len and resp[-1] != END),
                prompt_used=tuple(int(t) for t in prompts[n]),
                hinted=bool(hinted[n]),
            )
        )
    return out


def sample(params: PolicyParams, prompt: Sequence[int], temperature: float = 1.0,
           max_len: int = 64, seed: int = 0, top_k: int = 0, top_p: float = 1.0,
           backend: Optional[str] = None) -> Rollout:
    cfg = SampleConfig(temperature=temperature, max_len=max_len, top_k=top_k, top_p=top_p)
    return sample_batch(params, [prompt], cfg, np.random.default_rng(seed), backend=backend)[0]


def forward_windows(params: PolicyParams, windows: np.ndarray, backend: Optional[str] = None):
    return _kern(backend).forward(params.theta, *params.shape.dims, windows)


def backward_windows(params: PolicyParams, windows, hidden, dlogits, backend: Optional[str] = None):
    return _kern(backend).backward(
        params.theta, *params.shape.dims, windows,
        np.ascontiguousarray(hidden), np.ascontiguousarray(dlogits),
    )


def position_logprobs(params: PolicyParams, prompt, response, backend=None) -> np.ndarray:
    """Full next-token log-prob table ``(len(response), V)``."""
    response = np.asarray(response, dtype=np.int64)
    if response.size == 0:
        raise ValueError("response must be non-empty")
    _check_tokens(response, params.shape.vocab)
    _check_tokens(np.asarray(prompt, dtype=np.int64), params.shape.vocab)
    win = windows_for(prompt, response, params.shape.window)
    _, lp = forward_windows(params, win, backend)
    return lp


def logprobs(params: PolicyParams, prompt, response, backend=None) -> np.ndarray:
    lp = position_logprobs(params, prompt, response, backend)
    response = np.asarray(response, dtype=np.int64)
    return lp[np.arange(len(response)), response]


def logprob_grad(params: PolicyParams, prompt, response, position: int, backend=None) -> np.ndarray:
    """Gradient of ``log pi(response[position] | prompt, response[:position])``."""
    response = np.asarray(response, dtype=np.int64)
    if not 0 <= position < len(response):
        raise ValueError("position out of range")
    _check_tokens(response, params.shape.vocab)
    win = windows_for(prompt, response, params.shape.window)[position:position + 1]
    h, lp = forward_windows(params, win, backend)
    dz = -np.exp(lp)
    dz[0, response[position]] += 1.0
    return backward_windows(params, win, h, dz, backend)


def entropy_from_logprobs(lp: np.ndarray) -> np.ndarray:
    V = lp.shape[-1]
    p = np.exp(lp)
    H = np.clip(-(p * lp).sum(axis=-1), 0.0, np.log(V))
    # a constant row is exactly uniform
    flat = lp.max(axis=-1) == lp.min(axis=-1)
    return np.where(flat, np.log(V), H)


def entropy(params: PolicyParams, prompt, response_prefix, backend=None) -> np.ndarray:
    """Entropy (nats) of the next-token distribution after each prefix length.

    Returns ``len(response_prefix) + 1`` values: position ``t`` is the
    distribution conditioned on ``response_prefix[:t]``.
    """
    prefix = np.asarray(response_prefix, dtype=np.int64)
    _check_tokens(prefix, params.shape.vocab)
    padded = np.concatenate([prefix, [PAD]])
    win = windows_for(prompt, padded, params.shape.window)
    _, lp = forward_windows(params, win, backend)
    return entropy_from_logprobs(lp)


def save_checkpoint(params: PolicyParams, path) -> None:
    payload = params.theta.astype("<f8").tobytes()
    W, d, V, H = params.shape.dims
    header = _HEADER.pack(CHECKPOINT_MAGIC, params.version, W, d, V, H,
                          params.theta.size, zlib.crc32(payload))
    Path(path).write_bytes(header + payload)


def load_checkpoint(path, expected_shape: Optional[PolicyShape] = None) -> PolicyParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint truncated: incomplete header")
    magic, version, W, d, V, H, count, crc = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    try:
        shape = PolicyShape(W, d, V, H)
    except ValueError as exc:
        raise CheckpointError(f"invalid shape metadata: {exc}") from None
    if count != shape.n_params:
        raise CheckpointError(f"shape metadata implies {shape.n_params} parameters, header says {count}")
    payload = data[_HEADER.size:]
    if len(payload) != 8 * count:
        raise CheckpointError(f"checkpoint payload has {len(payload)} bytes, expected {8 * count}")
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint payload checksum mismatch")
    if expected_shape is not None and shape != expected_shape:
        raise CheckpointError(f"checkpoint shape {shape} does not match expected {expected_shape}")
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return PolicyParams(theta, shape, version)
