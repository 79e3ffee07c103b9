"""Pure numpy kernels for the window-MLP policy.

Parameter layout of the flat vector ``theta`` (float64, C order)::

    E  (V, d)      token embedding
    W1 (W, d, H)   per-window-slot input weights
    b1 (H,)
    W2 (H, V)
    b2 (V,)

A window is the ``W`` most recent context tokens, oldest first, left padded
with token 0.  The hidden pre-activation is ``b1 + sum_j E[x_j] @ W1[j]``;
it is computed through the slot table ``T[j, v] = E[v] @ W1[j]``.

The compiled module ``_kernels`` exposes the same three functions with the
same signatures; results agree to rounding.
"""

from __future__ import annotations

import numpy as np


def param_count(W: int, d: int, V: int, H: int) -> int:
    return V * d + W * d * H + H + H * V + V


def unpack(theta: np.ndarray, W: int, d: int, V: int, H: int):
    i = 0
    E = theta[i:i + V * d].reshape(V, d)
    i += V * d
    W1 = theta[i:i + W * d * H].reshape(W, d, H)
    i += W * d * H
    b1 = theta[i:i + H]
    i += H
    W2 = theta[i:i + H * V].reshape(H, V)
    i += H * V
    b2 = theta[i:i + V]
    return E, W1, b1, W2, b2


def _slot_table(E, W1):
    # (W, V, H)
    return np.einsum("vd,jdh->jvh", E, W1)


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def forward(theta, W, d, V, H, windows):
    """Hidden activations ``(N, H)`` and next-token log-probs ``(N, V)``."""
    windows = np.ascontiguousarray(windows, dtype=np.int64)
    E, W1, b1, W2, b2 = unpack(theta, W, d, V, H)
    T = _slot_table(E, W1)
    a = b1 + T[np.arange(W), windows].sum(axis=1)
    h = np.tanh(a)
    z = h @ W2 + b2
    return h, _log_softmax(z)


def backward(theta, W, d, V, H, windows, hidden, dlogits):
    """Gradient of ``sum(dlogits * logits)`` w.r.t. ``theta``."""
    windows = np.ascontiguousarray(windows, dtype=np.int64)
    E, W1, b1, W2, b2 = unpack(theta, W, d, V, H)
    grad = np.zeros_like(theta)
    gE, gW1, gb1, gW2, gb2 = unpack(grad, W, d, V, H)
    gb2 += dlogits.sum(axis=0)
    gW2 += hidden.T @ dlogits
    da = (dlogits @ W2.T) * (1.0 - hidden * hidden)
    gb1 += da.sum(axis=0)
    dT = np.zeros((W, V, H))
    for j in range(W):
        np.add.at(dT[j], windows[:, j], da)
    gW1 += np.einsum("vd,jvh->jdh", E, dT)
    gE += np.einsum("jvh,jdh->vd", dT, W1)
    return grad


def _sampling_probs(z, temperature, top_k, top_p):
    """Unnormalized sampling weights over the vocab for a batch of logits."""
    N, V = z.shape
    s = (z - z.max(axis=1, keepdims=True)) / temperature
    q = np.exp(s - s.max(axis=1, keepdims=True))
    if 0 < top_k < V:
        order = np.argsort(-z, axis=1, kind="stable")
        drop = order[:, top_k:]
        np.put_along_axis(q, drop, 0.0, axis=1)
    if top_p < 1.0:
        order = np.argsort(-q, axis=1, kind="stable")
        qs = np.take_along_axis(q, order, axis=1)
        cum = np.cumsum(qs, axis=1)
        total = cum[:, -1:]
        before = np.concatenate([np.zeros((N, 1)), cum[:, :-1]], axis=1)
        drop = before >= top_p * total
        qs[drop] = 0.0
        np.put_along_axis(q, order, qs, axis=1)
    return q


def sample(theta, W, d, V, H, prompts, prompt_offsets, uniforms,
           temperature, top_k, top_p, end_token):
    """Autoregressive sampling for ``N`` rollouts.

    ``prompts`` is the concatenation of all prompts, ``prompt_offsets`` has
    ``N + 1`` entries.  ``uniforms`` is ``(N, L_max)`` in [0, 1).  Returns
    ``tokens (N, L_max)``, ``lengths (N,)`` and the temperature-1 log-probs of
    the chosen tokens ``(N, L_max)``.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    offsets = np.asarray(prompt_offsets, dtype=np.int64)
    N, L = uniforms.shape
    plen = np.diff(offsets)
    P = int(plen.max()) if N else 0
    buf = np.zeros((N, W + P + L), dtype=np.int64)
    start = W + P - plen
    for n in range(N):
        buf[n, start[n]:W + P] = prompts[offsets[n]:offsets[n + 1]]
    E, W1, b1, W2, b2 = unpack(theta, W, d, V, H)
    T = _slot_table(E, W1)

    tokens = np.zeros((N, L), dtype=np.int64)
    logp = np.zeros((N, L))
    lengths = np.zeros(N, dtype=np.int64)
    active = np.arange(N)
    slots = np.arange(W)
    for t in range(L):
        if active.size == 0:
            break
        cur = W + P + t
        win = buf[active, cur - W:cur]
        h = np.tanh(b1 + T[slots, win].sum(axis=1))
        z = h @ W2 + b2
        lp = _log_softmax(z)
        q = _sampling_probs(z, temperature, top_k, top_p)
        cum = np.cumsum(q, axis=1)
        thresh = uniforms[active, t] * cum[:, -1]
        choice = (cum <= thresh[:, None]).sum(axis=1)
        # guard against rounding past the last kept token
        nz = q > 0
        last_kept = V - 1 - np.argmax(nz[:, ::-1], axis=1)
        choice = np.minimum(choice, last_kept)
        buf[active, cur] = choice
        tokens[active, t] = choice
        logp[active, t] = lp[np.arange(active.size), choice]
        lengths[active] = t + 1
        active = active[choice != end_token]
    return tokens, lengths, logp
