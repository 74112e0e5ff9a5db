"""Decoder-only byte-level transformer with learned absolute positions.

Two forward drivers share the same layer math:

- forward_batch: fixed causal mask, whole (B, T) batches, optional tape for
  the hand-derived backward pass. Used by training and scoring.
- forward: incremental, takes explicit position ids, an arbitrary boolean
  attention mask and a KV cache. Used by every decoding strategy, including
  tree-shaped drafts where the mask encodes ancestor chains.

Masking is additive: disallowed scores get a large negative constant before
softmax, which underflows to exactly zero weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEG_MASK = np.float32(-1e9)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 259
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 256
    max_positions: int = 256

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _tensor_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) order; init, checkpoints and Adam all follow it."""
    d, v, p, f = cfg.d_model, cfg.vocab_size, cfg.max_positions, cfg.d_ff
    shapes: list[tuple[str, tuple[int, ...]]] = [("wte", (v, d)), ("wpe", (p, d))]
    for i in range(cfg.n_layers):
        shapes += [
            (f"l{i}.ln1.g", (d,)),
            (f"l{i}.ln1.b", (d,)),
            (f"l{i}.attn.wq", (d, d)),
            (f"l{i}.attn.wk", (d, d)),
            (f"l{i}.attn.wv", (d, d)),
            (f"l{i}.attn.wo", (d, d)),
            (f"l{i}.ln2.g", (d,)),
            (f"l{i}.ln2.b", (d,)),
            (f"l{i}.mlp.w1", (d, f)),
            (f"l{i}.mlp.w2", (f, d)),
        ]
    shapes += [("lnf.g", (d,)), ("lnf.b", (d,)), ("lm_head", (d, v))]
    return shapes


@dataclass
class TransformerWeights:
    cfg: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["wte"].dtype

    def astype(self, dtype) -> "TransformerWeights":
        return TransformerWeights(self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        return [(name, self.tensors[name]) for name, _ in _tensor_shapes(self.cfg)]


def init_weights(cfg: ModelConfig, seed: int) -> TransformerWeights:
    """Scaled-normal init (std 0.02), ones for norm gains, zeros for norm offsets."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _tensor_shapes(cfg):
        if name.endswith(".g"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
    return TransformerWeights(cfg, tensors)


def causal_mask(n: int, prefix_len: int = 0) -> np.ndarray:
    """(n, prefix_len + n) boolean mask: row i sees the whole prefix plus new tokens 0..i."""
    if n < 0 or prefix_len < 0:
        raise ValueError("causal_mask sizes must be non-negative")
    new = np.tril(np.ones((n, n), dtype=bool))
    if prefix_len == 0:
        return new
    return np.concatenate([np.ones((n, prefix_len), dtype=bool), new], axis=1)


def greedy_next(logits_row: np.ndarray) -> int:
    """Deterministic greedy pick: maximal score, ties broken toward the lowest token id."""
    return int(np.argmax(logits_row))


def top_k_tokens(logits_row: np.ndarray, k: int) -> list[int]:
    """Best-first top-k token ids; equal scores keep ascending id order."""
    order = np.argsort(-logits_row, kind="stable")
    return [int(t) for t in order[:k]]


class KvCache:
    """Per-layer key/value rows for committed tokens.

    Forward never mutates the cache; callers append exactly the rows they
    decided to keep, so gathering a subset (tree verification) stays valid.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.keys = [np.zeros((0, cfg.d_model), dtype=np.float32) for _ in range(cfg.n_layers)]
        self.values = [np.zeros((0, cfg.d_model), dtype=np.float32) for _ in range(cfg.n_layers)]

    @property
    def length(self) -> int:
        return self.keys[0].shape[0]

    def append(self, new_kv: list[tuple[np.ndarray, np.ndarray]], rows: np.ndarray | None = None) -> None:
        """Commit new_kv rows (optionally a row subset, in the given order) to the cache."""
        for i, (k, v) in enumerate(new_kv):
            if rows is not None:
                k, v = k[rows], v[rows]
            self.keys[i] = np.concatenate([self.keys[i], k], axis=0)
            self.values[i] = np.concatenate([self.values[i], v], axis=0)


def _layer_norm_rows(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5):
    """x (..., d) -> (xhat * g + b, xhat, rstd); stats per trailing row."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * g + b, xhat, rstd


def _layer_norm_bwd(dy: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, g: np.ndarray):
    """Backward of _layer_norm_rows; returns (dx, dg, db) with dg/db summed over rows."""
    sum_axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=sum_axes)
    db = dy.sum(axis=sum_axes)
    dyg = dy * g
    dx = (dyg - dyg.mean(axis=-1, keepdims=True) - xhat * (dyg * xhat).mean(axis=-1, keepdims=True)) * rstd
    return dx, dg, db


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_parts(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smooth gelu (tanh form); returns (gelu(x), tanh term) so backward can reuse it."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu(x: np.ndarray) -> np.ndarray:
    return _gelu_parts(x)[0]


def _gelu_grad(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)


def _masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """scores (..., q, k) with boolean mask broadcast over leading dims -> attention weights."""
    dt = scores.dtype
    scores = np.where(mask, scores, dt.type(0) + NEG_MASK)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(
    weights: TransformerWeights,
    tokens: np.ndarray,
    positions: np.ndarray,
    mask: np.ndarray,
    cache: KvCache | None = None,
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """tokens (T,), positions (T,), mask (T, C+T) -> (logits (T, vocab), per-layer new (k, v)).

    The cache is read-only here; the returned KV rows cover only the T new
    tokens so the caller can commit the verified subset.
    """
    cfg = weights.cfg
    w = weights.tensors
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    t_new = tokens.shape[0]
    c_len = cache.length if cache is not None else 0
    if tokens.ndim != 1 or positions.shape != tokens.shape:
        raise ValueError("tokens and positions must be matching 1-D arrays")
    if t_new == 0:
        raise ValueError("forward needs at least one token")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if positions.min() < 0 or positions.max() >= cfg.max_positions:
        raise ValueError(f"position id out of range (max_positions={cfg.max_positions})")
    if mask.shape != (t_new, c_len + t_new):
        raise ValueError(f"mask shape {mask.shape} != expected {(t_new, c_len + t_new)}")
    if not mask.any(axis=1).all():
        raise ValueError("every mask row must attend to at least one column")

    h, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    x = w["wte"][tokens] + w["wpe"][positions]
    new_kv: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(cfg.n_layers):
        a, _, _ = _layer_norm_rows(x, w[f"l{i}.ln1.g"], w[f"l{i}.ln1.b"])
        q = a @ w[f"l{i}.attn.wq"]
        k = a @ w[f"l{i}.attn.wk"]
        v = a @ w[f"l{i}.attn.wv"]
        new_kv.append((k, v))
        if cache is not None and c_len:
            k_all = np.concatenate([cache.keys[i], k], axis=0)
            v_all = np.concatenate([cache.values[i], v], axis=0)
        else:
            k_all, v_all = k, v
        qh = q.reshape(t_new, h, hd).transpose(1, 0, 2)
        kh = k_all.reshape(c_len + t_new, h, hd).transpose(1, 0, 2)
        vh = v_all.reshape(c_len + t_new, h, hd).transpose(1, 0, 2)
        scores = (qh @ kh.transpose(0, 2, 1)) * scale
        attn = _masked_softmax(scores, mask[None, :, :])
        o = (attn @ vh).transpose(1, 0, 2).reshape(t_new, cfg.d_model)
        x = x + o @ w[f"l{i}.attn.wo"]
        b, _, _ = _layer_norm_rows(x, w[f"l{i}.ln2.g"], w[f"l{i}.ln2.b"])
        x = x + _gelu(b @ w[f"l{i}.mlp.w1"]) @ w[f"l{i}.mlp.w2"]
    xf, _, _ = _layer_norm_rows(x, w["lnf.g"], w["lnf.b"])
    logits = xf @ w["lm_head"]
    return logits, new_kv


def forward_batch(
    weights: TransformerWeights, tokens: np.ndarray, record: bool = False
) -> tuple[np.ndarray, dict | None]:
    """tokens (B, T) -> (logits (B, T, vocab), tape or None). Causal mask, positions 0..T-1."""
    cfg = weights.cfg
    w = weights.tensors
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError("forward_batch expects (B, T) tokens")
    bsz, t = tokens.shape
    if t > cfg.max_positions:
        raise ValueError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
    h, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    mask = np.tril(np.ones((t, t), dtype=bool))

    x = w["wte"][tokens] + w["wpe"][:t]
    tape: dict | None = {"tokens": tokens, "layers": [], "x0": x} if record else None
    for i in range(cfg.n_layers):
        x_in = x
        a, a_hat, a_rstd = _layer_norm_rows(x, w[f"l{i}.ln1.g"], w[f"l{i}.ln1.b"])
        q = a @ w[f"l{i}.attn.wq"]
        k = a @ w[f"l{i}.attn.wk"]
        v = a @ w[f"l{i}.attn.wv"]
        # head-major (B, H, T, hd) layouts keep the contractions on the BLAS path
        qh = q.reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
        kh = k.reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
        vh = v.reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        attn = _masked_softmax(scores, mask[None, None, :, :])
        o = (attn @ vh).transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)
        x_mid = x_in + o @ w[f"l{i}.attn.wo"]
        b, b_hat, b_rstd = _layer_norm_rows(x_mid, w[f"l{i}.ln2.g"], w[f"l{i}.ln2.b"])
        m1 = b @ w[f"l{i}.mlp.w1"]
        g, gt = _gelu_parts(m1)
        x = x_mid + g @ w[f"l{i}.mlp.w2"]
        if record:
            tape["layers"].append(
                {"a": a, "a_hat": a_hat, "a_rstd": a_rstd, "attn": attn, "vh": vh, "o": o,
                 "x_mid": x_mid, "b": b, "b_hat": b_hat, "b_rstd": b_rstd, "m1": m1, "g": g,
                 "gt": gt, "qh": qh, "kh": kh}
            )
    xf, f_hat, f_rstd = _layer_norm_rows(x, w["lnf.g"], w["lnf.b"])
    logits = (xf.reshape(-1, cfg.d_model) @ w["lm_head"]).reshape(bsz, t, cfg.vocab_size)
    if record:
        tape.update({"xf": xf, "f_hat": f_hat, "f_rstd": f_rstd})
    return logits, tape


def backward_batch(weights: TransformerWeights, tape: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every tensor given dloss/dlogits for a recorded forward_batch."""
    cfg = weights.cfg
    w = weights.tensors
    h, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    tokens = tape["tokens"]
    bsz, t = tokens.shape
    grads = {name: np.zeros_like(arr) for name, arr in w.items()}

    d_model, d_ff = cfg.d_model, cfg.d_ff
    dlog2 = dlogits.reshape(-1, cfg.vocab_size)
    grads["lm_head"] += tape["xf"].reshape(-1, d_model).T @ dlog2
    dxf = (dlog2 @ w["lm_head"].T).reshape(bsz, t, d_model)
    dx, dg, db = _layer_norm_bwd(dxf, tape["f_hat"], tape["f_rstd"], w["lnf.g"])
    grads["lnf.g"] += dg
    grads["lnf.b"] += db

    for i in reversed(range(cfg.n_layers)):
        tp = tape["layers"][i]
        # mlp: x = x_mid + gelu(b @ w1) @ w2
        dm2 = dx.reshape(-1, d_model)
        grads[f"l{i}.mlp.w2"] += tp["g"].reshape(-1, d_ff).T @ dm2
        dgelu = (dm2 @ w[f"l{i}.mlp.w2"].T).reshape(bsz, t, d_ff)
        dm1 = dgelu * _gelu_grad(tp["m1"], tp["gt"])
        dm1_2 = dm1.reshape(-1, d_ff)
        grads[f"l{i}.mlp.w1"] += tp["b"].reshape(-1, d_model).T @ dm1_2
        db_in = (dm1_2 @ w[f"l{i}.mlp.w1"].T).reshape(bsz, t, d_model)
        dx_mid, dg2, db2 = _layer_norm_bwd(db_in, tp["b_hat"], tp["b_rstd"], w[f"l{i}.ln2.g"])
        grads[f"l{i}.ln2.g"] += dg2
        grads[f"l{i}.ln2.b"] += db2
        dx_mid = dx_mid + dx
        # attention: x_mid = x_in + (attn @ v) @ wo
        dxm2 = dx_mid.reshape(-1, d_model)
        do = (dxm2 @ w[f"l{i}.attn.wo"].T).reshape(bsz, t, h, hd).transpose(0, 2, 1, 3)
        grads[f"l{i}.attn.wo"] += tp["o"].reshape(-1, d_model).T @ dxm2
        dattn = do @ tp["vh"].transpose(0, 1, 3, 2)
        dvh = tp["attn"].transpose(0, 1, 3, 2) @ do
        # softmax backward: masked weights are exactly zero so their grads vanish
        tmp = (dattn * tp["attn"]).sum(axis=-1, keepdims=True)
        dscores = tp["attn"] * (dattn - tmp)
        dqh = (dscores @ tp["kh"]) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ tp["qh"]) * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(-1, d_model)
        dk = dkh.transpose(0, 2, 1, 3).reshape(-1, d_model)
        dv = dvh.transpose(0, 2, 1, 3).reshape(-1, d_model)
        a2 = tp["a"].reshape(-1, d_model)
        grads[f"l{i}.attn.wq"] += a2.T @ dq
        grads[f"l{i}.attn.wk"] += a2.T @ dk
        grads[f"l{i}.attn.wv"] += a2.T @ dv
        da = (
            dq @ w[f"l{i}.attn.wq"].T
            + dk @ w[f"l{i}.attn.wk"].T
            + dv @ w[f"l{i}.attn.wv"].T
        ).reshape(bsz, t, d_model)
        dx_in, dg1, db1 = _layer_norm_bwd(da, tp["a_hat"], tp["a_rstd"], w[f"l{i}.ln1.g"])
        grads[f"l{i}.ln1.g"] += dg1
        grads[f"l{i}.ln1.b"] += db1
        dx = dx_in + dx_mid

    np.add.at(grads["wte"], tokens.reshape(-1), dx.reshape(-1, cfg.d_model))
    grads["wpe"][:t] += dx.sum(axis=0)
    return grads
