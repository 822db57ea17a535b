"""Numpy implementation of the multi-attribute transformer and its exact gradients.

Shapes used throughout: ``B`` batch, ``L`` window length (``max_len``),
``D`` model width, ``h`` heads, ``dk = D / h``. Every public layer function
accepts arbitrary leading batch dimensions.

Parameters live in a flat ``dict[str, ndarray]``:

- ``embed.<attr>``          (vocab, d_e) per categorical attribute
- ``input.W``, ``input.b``  projection of the concatenated per-step features
- ``block<i>.<name>``       Wq Wk Wv Wo ln1_g ln1_b W1 b1 W2 b2 ln2_g ln2_b
- ``head.W``, ``head.b``    (L*D + n_scalars, C) output layer

The sinusoidal position table is fixed and is not part of the parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

LN_EPS = 1e-5

BLOCK_KEYS = ("Wq", "Wk", "Wv", "Wo", "ln1_g", "ln1_b", "W1", "b1", "W2", "b2",
              "ln2_g", "ln2_b")


class InvalidConfigError(ValueError):
    pass


class AllMaskedError(ValueError):
    pass


class IndexOutOfVocabError(IndexError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def embedding_dim(vocab_size: int) -> int:
    """Per-attribute embedding width: vocab size rounded up to even, capped at 32."""
    return min(32, vocab_size + (vocab_size % 2))


@dataclass(frozen=True)
class TransformerConfig:
    max_len: int
    num_classes: int
    categorical: tuple[tuple[str, int, int], ...]  # (name, vocab size, d_e)
    numeric: tuple[str, ...] = ()
    n_scalars: int = 1
    embed_dim: int = 16
    num_heads: int = 2
    ff_dim: int = 32
    num_blocks: int = 1
    dropout: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise InvalidConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.embed_dim % 2:
            raise InvalidConfigError("embed_dim must be even for the position table")
        if not 0 <= self.dropout < 1:
            raise InvalidConfigError("dropout must lie in [0, 1)")
        if self.max_len < 1 or self.num_classes < 1 or self.num_blocks < 1:
            raise InvalidConfigError("max_len, num_classes and num_blocks must be >= 1")
        if not self.categorical:
            raise InvalidConfigError("at least one categorical attribute is required")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def step_width(self) -> int:
        """Width of one position's features before the input projection."""
        return sum(d for _, _, d in self.categorical) + len(self.numeric)

    @classmethod
    def from_layout(cls, layout, num_classes: int, **kwargs) -> "TransformerConfig":
        cats = tuple((name, size, embedding_dim(size)) for name, size in layout.categorical)
        return cls(max_len=layout.max_len, num_classes=num_classes, categorical=cats,
                   numeric=tuple(layout.numeric), **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categorical"] = [list(c) for c in self.categorical]
        d["numeric"] = list(self.numeric)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        d = dict(d)
        d["categorical"] = tuple(tuple(c) for c in d["categorical"])
        d["numeric"] = tuple(d["numeric"])
        return cls(**d)


@dataclass
class Batch:
    """Model inputs for ``B`` samples.

    cat: (B, n_cat, L) int, num: (B, n_num, L) float, mask: (B, L) bool,
    scalars: (B, n_scalars) float joined at the output head.
    """

    cat: np.ndarray
    num: np.ndarray
    mask: np.ndarray
    scalars: np.ndarray

    def __len__(self) -> int:
        return self.cat.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.cat[idx], self.num[idx], self.mask[idx], self.scalars[idx])

    @classmethod
    def from_matrix(cls, X, layout) -> "Batch":
        cat, num, prefix_len, mask = layout.split(X)
        scalars = (prefix_len / layout.max_len)[:, None].astype(float)
        return cls(cat, num, mask, scalars)

    @classmethod
    def from_samples(cls, samples, max_len: int) -> "Batch":
        cat = np.stack([np.stack(list(s.categorical_seqs.values())) for s in samples])
        if samples[0].numeric_seqs:
            num = np.stack([np.stack(list(s.numeric_seqs.values())) for s in samples])
        else:
            num = np.zeros((len(samples), 0, max_len))
        mask = np.stack([s.mask for s in samples])
        scalars = np.array([[s.prefix_len / max_len] for s in samples], dtype=float)
        return cls(cat, num, mask, scalars)


# -- initialisation ---------------------------------------------------------


def _glorot(rng, shape):
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: TransformerConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D, F = config.embed_dim, config.ff_dim
    p = {}
    for name, vocab, d_e in config.categorical:
        p[f"embed.{name}"] = _glorot(rng, (vocab, d_e))
    p["input.W"] = _glorot(rng, (config.step_width, D))
    p["input.b"] = np.zeros(D)
    for i in range(config.num_blocks):
        for key in ("Wq", "Wk", "Wv", "Wo"):
            p[f"block{i}.{key}"] = _glorot(rng, (D, D))
        p[f"block{i}.ln1_g"] = np.ones(D)
        p[f"block{i}.ln1_b"] = np.zeros(D)
        p[f"block{i}.W1"] = _glorot(rng, (D, F))
        p[f"block{i}.b1"] = np.zeros(F)
        p[f"block{i}.W2"] = _glorot(rng, (F, D))
        p[f"block{i}.b2"] = np.zeros(D)
        p[f"block{i}.ln2_g"] = np.ones(D)
        p[f"block{i}.ln2_b"] = np.zeros(D)
    p["head.W"] = _glorot(rng, (config.max_len * D + config.n_scalars, config.num_classes))
    p["head.b"] = np.zeros(config.num_classes)
    return p


def block_params(params: dict, i: int) -> dict:
    return {key: params[f"block{i}.{key}"] for key in BLOCK_KEYS}


def check_params(params: dict, config: TransformerConfig) -> None:
    """Raise ``InvalidConfigError`` when tensor shapes disagree with ``config``."""
    expected = init_params(config, 0)
    if set(expected) != set(params):
        raise InvalidConfigError(
            f"parameter names differ: {sorted(set(expected) ^ set(params))}")
    for name, ref in expected.items():
        if params[name].shape != ref.shape:
            raise InvalidConfigError(
                f"{name}: shape {params[name].shape}, expected {ref.shape}")


# -- layers -----------------------------------------------------------------


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    if max_len < 1 or d_model % 2:
        raise ValueError("need max_len >= 1 and an even d_model")
    pos = np.arange(max_len)[:, None]
    freq = 10000.0 ** (np.arange(0, d_model, 2) / d_model)
    P = np.zeros((max_len, d_model))
    P[:, 0::2] = np.sin(pos / freq)
    P[:, 1::2] = np.cos(pos / freq)
    return P


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _attention_fwd(Q, K, V, mask):
    if not np.all(mask.any(axis=-1)):
        raise AllMaskedError("a query row has no unmasked key")
    dk = Q.shape[-1]
    scores = Q @ np.swapaxes(K, -1, -2) / np.sqrt(dk)
    scores = np.where(mask[..., None, :], scores, -np.inf)
    weights = _softmax(scores)
    return weights @ V, weights


def attention(Q, K, V, mask) -> np.ndarray:
    """Scaled dot-product attention; ``mask`` marks usable key positions."""
    out, _ = _attention_fwd(np.asarray(Q, float), np.asarray(K, float),
                            np.asarray(V, float), np.asarray(mask, bool))
    return out


def _split_heads(X, h):
    *lead, L, D = X.shape
    return np.swapaxes(X.reshape(*lead, L, h, D // h), -2, -3)


def _merge_heads(X):
    X = np.swapaxes(X, -2, -3)
    *lead, L, h, dk = X.shape
    return X.reshape(*lead, L, h * dk)


def _mha_fwd(X, bp, mask, h):
    Q, K, V = X @ bp["Wq"], X @ bp["Wk"], X @ bp["Wv"]
    Qh, Kh, Vh = _split_heads(Q, h), _split_heads(K, h), _split_heads(V, h)
    Oh, weights = _attention_fwd(Qh, Kh, Vh, mask[..., None, :])
    O = _merge_heads(Oh)
    return O @ bp["Wo"], (X, Qh, Kh, Vh, weights, O)


def multi_head_attention(X, bp: dict, mask, num_heads: int) -> np.ndarray:
    out, _ = _mha_fwd(np.asarray(X, float), bp, np.asarray(mask, bool), num_heads)
    return out


def _layer_norm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def layer_norm(x, g, b) -> np.ndarray:
    return _layer_norm_fwd(np.asarray(x, float), g, b)[0]


def _layer_norm_bwd(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dg, db


def feed_forward(x, W1, b1, W2, b2) -> np.ndarray:
    return np.maximum(x @ W1 + b1, 0.0) @ W2 + b2


def _dropout_mask(shape, rate, rng):
    if rate == 0 or rng is None:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _block_fwd(X, bp, mask, h, dropout, rng):
    M, mha_cache = _mha_fwd(X, bp, mask, h)
    drop1 = _dropout_mask(M.shape, dropout, rng)
    A, ln1 = _layer_norm_fwd(X + (M if drop1 is None else M * drop1),
                             bp["ln1_g"], bp["ln1_b"])
    H1 = A @ bp["W1"] + bp["b1"]
    Hr = np.maximum(H1, 0.0)
    F = Hr @ bp["W2"] + bp["b2"]
    drop2 = _dropout_mask(F.shape, dropout, rng)
    Y, ln2 = _layer_norm_fwd(A + (F if drop2 is None else F * drop2),
                             bp["ln2_g"], bp["ln2_b"])
    if not np.all(np.isfinite(Y)):
        raise NonFiniteError("non-finite activations in encoder block")
    return Y, (mha_cache, drop1, ln1, A, H1, Hr, drop2, ln2)


def encoder_block(X, bp: dict, mask, num_heads: int, dropout: float = 0.0,
                  train_mode: bool = False, rng=None) -> np.ndarray:
    """Self-attention and feed-forward sublayers, each with residual + LayerNorm.

    Dropout is applied to each sublayer output only when ``train_mode`` is set.
    """
    if train_mode and dropout > 0 and rng is None:
        rng = np.random.default_rng()
    Y, _ = _block_fwd(np.asarray(X, float), bp, np.asarray(mask, bool), num_heads,
                      dropout if train_mode else 0.0, rng)
    return Y


def _block_bwd(dY, bp, cache, h):
    (X, Qh, Kh, Vh, weights, O), drop1, ln1, A, H1, Hr, drop2, ln2 = cache
    g = {}
    dR2, g["ln2_g"], g["ln2_b"] = _layer_norm_bwd(dY, bp["ln2_g"], ln2)
    dF = dR2 if drop2 is None else dR2 * drop2
    D, F = bp["W1"].shape
    g["W2"] = Hr.reshape(-1, F).T @ dF.reshape(-1, D)
    g["b2"] = dF.reshape(-1, D).sum(axis=0)
    dH1 = (dF @ bp["W2"].T) * (H1 > 0)
    g["W1"] = A.reshape(-1, D).T @ dH1.reshape(-1, F)
    g["b1"] = dH1.reshape(-1, F).sum(axis=0)
    dA = dR2 + dH1 @ bp["W1"].T

    dR1, g["ln1_g"], g["ln1_b"] = _layer_norm_bwd(dA, bp["ln1_g"], ln1)
    dX = dR1.copy()
    dM = dR1 if drop1 is None else dR1 * drop1
    g["Wo"] = O.reshape(-1, D).T @ dM.reshape(-1, D)
    dOh = _split_heads(dM @ bp["Wo"].T, h)
    dW = dOh @ np.swapaxes(Vh, -1, -2)
    dVh = np.swapaxes(weights, -1, -2) @ dOh
    dS = weights * (dW - (dW * weights).sum(axis=-1, keepdims=True))
    dS /= np.sqrt(Qh.shape[-1])
    dQh = dS @ Kh
    dKh = np.swapaxes(dS, -1, -2) @ Qh
    Xf = X.reshape(-1, D)
    for key, dPh in (("Wq", dQh), ("Wk", dKh), ("Wv", dVh)):
        dP = _merge_heads(dPh)
        g[key] = Xf.T @ dP.reshape(-1, D)
        dX += dP @ bp[key].T
    return dX, g


# -- full model -------------------------------------------------------------


def _embed_fwd(batch: Batch, params, config: TransformerConfig):
    parts = []
    for a, (name, vocab, _) in enumerate(config.categorical):
        idx = batch.cat[:, a, :]
        if idx.min(initial=0) < 0 or idx.max(initial=0) >= vocab:
            raise IndexOutOfVocabError(f"index outside vocabulary of {name!r}")
        parts.append(params[f"embed.{name}"][idx])
    if config.numeric:
        parts.append(np.swapaxes(batch.num, 1, 2))
    Z = np.concatenate(parts, axis=-1)
    P = positional_encoding(config.max_len, config.embed_dim)
    return Z @ params["input.W"] + params["input.b"] + P, Z


def embed_sequence(sample, params, config: TransformerConfig) -> np.ndarray:
    """Embed one :class:`PrefixSample` into a ``(max_len, embed_dim)`` matrix."""
    X, _ = _embed_fwd(Batch.from_samples([sample], config.max_len), params, config)
    return X[0]


def _forward(batch: Batch, params, config: TransformerConfig, train_mode=False,
             rng=None):
    X, Z = _embed_fwd(batch, params, config)
    dropout = config.dropout if train_mode else 0.0
    if dropout and rng is None:
        rng = np.random.default_rng()
    caches = []
    for i in range(config.num_blocks):
        X, c = _block_fwd(X, block_params(params, i), batch.mask, config.num_heads,
                          dropout, rng)
        caches.append(c)
    B = len(batch)
    # padded rows are zeroed so the head never sees them
    flat = (X * batch.mask[..., None]).reshape(B, -1)
    head_in = np.concatenate([flat, batch.scalars], axis=1)
    logits = head_in @ params["head.W"] + params["head.b"]
    return _softmax(logits), (Z, caches, head_in)


def forward(batch: Batch, params, config: TransformerConfig, train_mode: bool = False,
            rng=None) -> np.ndarray:
    """Class probabilities, shape ``(B, num_classes)``."""
    return _forward(batch, params, config, train_mode, rng)[0]


def loss_and_grads(batch: Batch, labels, params, config: TransformerConfig,
                   train_mode: bool = False, rng=None):
    """Mean cross-entropy over the batch and its gradient for every tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    probs, (Z, caches, head_in) = _forward(batch, params, config, train_mode, rng)
    B, C = probs.shape
    picked = probs[np.arange(B), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")

    grads = {}
    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    grads["head.W"] = head_in.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    L, D = config.max_len, config.embed_dim
    dflat = (dlogits @ params["head.W"].T)[:, : L * D]
    dX = dflat.reshape(B, L, D) * batch.mask[..., None]
    for i in reversed(range(config.num_blocks)):
        dX, g = _block_bwd(dX, block_params(params, i), caches[i], config.num_heads)
        for key, val in g.items():
            grads[f"block{i}.{key}"] = val

    grads["input.W"] = Z.reshape(-1, Z.shape[-1]).T @ dX.reshape(-1, D)
    grads["input.b"] = dX.reshape(-1, D).sum(axis=0)
    dZ = dX @ params["input.W"].T
    offset = 0
    for a, (name, vocab, d_e) in enumerate(config.categorical):
        g = np.zeros((vocab, d_e))
        np.add.at(g, batch.cat[:, a, :].ravel(),
                  dZ[..., offset: offset + d_e].reshape(-1, d_e))
        grads[f"embed.{name}"] = g
        offset += d_e
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    return loss, grads
