"""Pre-norm decoder-only transformer in float64 numpy with a hand-written backward pass.

The model is deliberately small: learned token and position embeddings, ``n_layers``
blocks of causal multi-head attention followed by a GELU MLP, a final layer norm and
a separate unembedding matrix. Every trainable tensor lives in a :class:`ParameterView`
under a stable dotted name, which is what masking and the optimizer operate on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import NumericError, SequenceLengthError, StructuralError, VocabularyError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int
    n_layers: int
    d_model: int
    n_heads: int
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "n_layers", "d_model", "n_heads"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise StructuralError(f"{name} must be a positive integer, got {value!r}")
        if self.vocab_size < 2 or self.context_len < 2:
            raise StructuralError("vocab_size and context_len must be at least 2")
        if self.d_model % self.n_heads:
            raise StructuralError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.seed < 0:
            raise StructuralError("seed must be unsigned")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Names and shapes in enumeration order; a pure function of the config."""
        d, V, T, F = self.d_model, self.vocab_size, self.context_len, self.d_ff
        shapes = [("tok_emb", (V, d)), ("pos_emb", (T, d))]
        for layer in range(self.n_layers):
            p = f"h{layer}."
            shapes += [
                (p + "ln1.g", (d,)),
                (p + "ln1.b", (d,)),
                (p + "attn.w_qkv", (d, 3 * d)),
                (p + "attn.b_qkv", (3 * d,)),
                (p + "attn.w_o", (d, d)),
                (p + "attn.b_o", (d,)),
                (p + "ln2.g", (d,)),
                (p + "ln2.b", (d,)),
                (p + "mlp.w_in", (d, F)),
                (p + "mlp.b_in", (F,)),
                (p + "mlp.w_out", (F, d)),
                (p + "mlp.b_out", (d,)),
            ]
        shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("unembed", (d, V))]
        return shapes


class ParameterView:
    """Ordered, name-addressable collection of float64 arrays."""

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]]):
        self._entries: dict[str, np.ndarray] = {}
        for name, values in entries:
            if name in self._entries:
                raise StructuralError(f"duplicate layer name {name!r}")
            self._entries[name] = np.asarray(values, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __setitem__(self, name: str, values: np.ndarray) -> None:
        if name not in self._entries:
            raise StructuralError(f"unknown layer name {name!r}")
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self._entries[name].shape:
            raise StructuralError(f"shape mismatch for {name}: {values.shape} vs {self._entries[name].shape}")
        self._entries[name] = values

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def entries(self) -> list[tuple[str, tuple[int, ...], np.ndarray]]:
        return [(name, v.shape, v) for name, v in self._entries.items()]

    @property
    def total_count(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    def copy(self) -> "ParameterView":
        return ParameterView((k, v.copy()) for k, v in self._entries.items())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParameterView":
        return ParameterView((k, fn(v)) for k, v in self._entries.items())

    def zeros_like(self) -> "ParameterView":
        return self.map(np.zeros_like)

    def check_aligned(self, other: "ParameterView") -> None:
        if self.names() != other.names():
            raise StructuralError("parameter views enumerate different layer names")
        for name in self._entries:
            if self[name].shape != other[name].shape:
                raise StructuralError(f"shape mismatch for {name}")

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def equal(self, other: "ParameterView") -> bool:
        """Bit-exact equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self._entries
        )


def init_params(config: ModelConfig) -> ParameterView:
    rng = np.random.default_rng(config.seed)
    proj_std = 0.02 / math.sqrt(2 * config.n_layers)
    entries = []
    for name, shape in config.parameter_shapes():
        if name.endswith(".g"):
            values = np.ones(shape)
        elif len(shape) == 1:
            values = np.zeros(shape)
        elif name.endswith("w_o") or name.endswith("w_out"):
            values = rng.normal(0.0, proj_std, shape)
        else:
            values = rng.normal(0.0, 0.02, shape)
        entries.append((name, values))
    return ParameterView(entries)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-softmax over the last axis with max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("log_softmax received non-finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


class Model:
    """A config plus its parameters. ``forward`` accepts one sequence or a (B, T) batch."""

    def __init__(self, config: ModelConfig, params: ParameterView | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        expected = config.parameter_shapes()
        if [(n, tuple(s)) for n, s, _ in self.params.entries] != expected:
            raise StructuralError("parameters do not match the model config")

    def with_params(self, params: ParameterView) -> "Model":
        return Model(self.config, params)

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise SequenceLengthError("expected a non-empty token sequence")
        if tokens.shape[1] > self.config.context_len:
            raise SequenceLengthError(
                f"sequence of length {tokens.shape[1]} exceeds context_len={self.config.context_len}"
            )
        if not np.issubdtype(tokens.dtype, np.integer):
            raise VocabularyError("token ids must be integers")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise VocabularyError(f"token id out of range [0, {self.config.vocab_size})")
        return tokens

    def forward(self, tokens, return_cache: bool = False):
        """Logits of shape (T, V) for a 1-D input, (B, T, V) for a batch."""
        single = np.ndim(tokens) == 1
        tokens = self._check_tokens(tokens)
        cfg, P = self.config, self.params
        B, T = tokens.shape
        H, dh = cfg.n_heads, cfg.d_head
        scale = 1.0 / math.sqrt(dh)
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)

        x = P["tok_emb"][tokens] + P["pos_emb"][:T]
        blocks = []
        for layer in range(cfg.n_layers):
            p = f"h{layer}."
            h, ln1 = _layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            qkv = h @ P[p + "attn.w_qkv"] + P[p + "attn.b_qkv"]
            q, k, v = (
                qkv[..., i * cfg.d_model:(i + 1) * cfg.d_model].reshape(B, T, H, dh).transpose(0, 2, 1, 3)
                for i in range(3)
            )
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale
            scores = np.where(causal, -np.inf, scores)
            scores = scores - scores.max(axis=-1, keepdims=True)
            att = np.exp(scores)
            att /= att.sum(axis=-1, keepdims=True)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            x = x + o @ P[p + "attn.w_o"] + P[p + "attn.b_o"]
            h2, ln2 = _layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            u = h2 @ P[p + "mlp.w_in"] + P[p + "mlp.b_in"]
            gl, t = _gelu(u)
            x = x + gl @ P[p + "mlp.w_out"] + P[p + "mlp.b_out"]
            blocks.append((h, ln1, q, k, v, att, o, h2, ln2, u, gl, t))
        xf, lnf = _layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        logits = xf @ P["unembed"]
        if single:
            logits = logits[0]
        if not return_cache:
            return logits
        return logits, {"tokens": tokens, "blocks": blocks, "xf": xf, "lnf": lnf, "single": single}

    def backward(self, cache: dict, dlogits) -> ParameterView:
        """Gradient of a scalar loss given its gradient with respect to the logits."""
        cfg, P = self.config, self.params
        tokens = cache["tokens"]
        B, T = tokens.shape
        H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
        scale = 1.0 / math.sqrt(dh)
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if cache["single"] and dlogits.ndim == 2:
            dlogits = dlogits[None]
        if dlogits.shape != (B, T, cfg.vocab_size):
            raise StructuralError(f"upstream gradient shape {dlogits.shape} != {(B, T, cfg.vocab_size)}")

        grads: dict[str, np.ndarray] = {}
        grads["unembed"] = cache["xf"].reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab_size)
        dx, grads["ln_f.g"], grads["ln_f.b"] = _layer_norm_backward(dlogits @ P["unembed"].T, cache["lnf"])

        for layer in reversed(range(cfg.n_layers)):
            p = f"h{layer}."
            h, ln1, q, k, v, att, o, h2, ln2, u, gl, t = cache["blocks"][layer]
            # MLP branch
            grads[p + "mlp.w_out"] = gl.reshape(-1, cfg.d_ff).T @ dx.reshape(-1, d)
            grads[p + "mlp.b_out"] = dx.sum(axis=(0, 1))
            du = (dx @ P[p + "mlp.w_out"].T) * _gelu_grad(u, t)
            grads[p + "mlp.w_in"] = h2.reshape(-1, d).T @ du.reshape(-1, cfg.d_ff)
            grads[p + "mlp.b_in"] = du.sum(axis=(0, 1))
            dh2 = du @ P[p + "mlp.w_in"].T
            dx_ln, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layer_norm_backward(dh2, ln2)
            dx = dx + dx_ln
            # attention branch
            grads[p + "attn.w_o"] = o.reshape(-1, d).T @ dx.reshape(-1, d)
            grads[p + "attn.b_o"] = dx.sum(axis=(0, 1))
            do = (dx @ P[p + "attn.w_o"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            datt = do @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ do
            dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
            dq = dscores @ k
            dk = dscores.transpose(0, 1, 3, 2) @ q
            dqkv = np.concatenate(
                [g.transpose(0, 2, 1, 3).reshape(B, T, d) for g in (dq, dk, dv)], axis=-1
            )
            grads[p + "attn.w_qkv"] = h.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
            grads[p + "attn.b_qkv"] = dqkv.sum(axis=(0, 1))
            dx_ln, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layer_norm_backward(
                dqkv @ P[p + "attn.w_qkv"].T, ln1
            )
            dx = dx + dx_ln

        dtok = np.zeros_like(P["tok_emb"])
        np.add.at(dtok, tokens.ravel(), dx.reshape(-1, d))
        grads["tok_emb"] = dtok
        dpos = np.zeros_like(P["pos_emb"])
        dpos[:T] = dx.sum(axis=0)
        grads["pos_emb"] = dpos
        return ParameterView((name, grads[name]) for name in P.names())

    def log_probs(self, tokens) -> np.ndarray:
        return log_softmax(self.forward(tokens))

    @property
    def num_params(self) -> int:
        return self.params.total_count


def forward(model: Model, tokens) -> np.ndarray:
    return model.forward(tokens)


def backward(model: Model, tokens, dlogits) -> ParameterView:
    """Recompute the forward pass for ``tokens`` and backpropagate ``dlogits``."""
    _, cache = model.forward(tokens, return_cache=True)
    return model.backward(cache, dlogits)
