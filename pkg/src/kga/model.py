"""Small pre-norm decoder-only transformer in numpy.

Layout per layer: ``x + Attn(LN(x))`` followed by ``x + FFN(LN(x))``, with a
final LayerNorm and an LM head tied to the token embedding. Inputs are
``sqrt(D) * E[token] + PE[position]`` with sinusoidal ``PE``. Positions are
supplied by the caller, so every segment (a triple, a question) may restart
at position 0.

The inference forward keeps a per-layer key/value cache and accepts optional
external keys/values per layer. External entries are visible to every query
and are joined to the input keys under one softmax; with ``cross=True`` the
queries see only the external entries.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accounting import AttentionCounter, attention_flops
from .tensor import SeededRng, seeded_normal, softmax_rows

LN_EPS = 1e-5
QUERY_CHUNK = 256
MAGIC = b"KGA1"


class CapacityError(ValueError):
    """Sequence longer than the model's ``max_seq_len``."""


class OrderingError(ValueError):
    """Attention requested for a position whose states are not populated."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 64
    max_seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, in checkpoint order."""
    D, F = cfg.model_dim, cfg.ffn_dim
    shapes = {"tok_emb": (cfg.vocab_size, D)}
    for l in range(cfg.num_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.wq": (D, D), p + "attn.wk": (D, D),
            p + "attn.wv": (D, D), p + "attn.wo": (D, D),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "ffn.w1": (D, F), p + "ffn.b1": (F,),
            p + "ffn.w2": (F, D), p + "ffn.b2": (D,),
        })
    shapes["ln_f.g"] = (D,)
    shapes["ln_f.b"] = (D,)
    return shapes


def sinusoidal_positions(positions, dim: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((pos.shape[0], dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim - dim // 2])
    return pe


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u * u * u)))


def split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, num_heads, d // num_heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.params):
            raise ValueError("parameter names do not match the config")
        for name, shape in shapes.items():
            a = self.params[name]
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name}: non-finite weights")
            a.setflags(write=False)

    @classmethod
    def init(cls, config: ModelConfig) -> "Model":
        rng = SeededRng(config.seed)
        D, F, L = config.model_dim, config.ffn_dim, config.num_layers
        params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "tok_emb":
                params[name] = seeded_normal(rng, *shape, stddev=D**-0.5)
            elif leaf == "g":
                params[name] = np.ones(shape)
            elif len(shape) == 1:
                params[name] = np.zeros(shape)
            elif leaf in ("wo", "w2"):
                params[name] = seeded_normal(rng, *shape, stddev=shape[0] ** -0.5 / np.sqrt(2 * L))
            else:
                params[name] = seeded_normal(rng, *shape, stddev=shape[0] ** -0.5)
        return cls(config, params)

    def layer(self, l: int) -> dict[str, np.ndarray]:
        prefix = f"layers.{l}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def to_bytes(self) -> bytes:
        c = self.config
        head = MAGIC + struct.pack(
            "<6qQ", c.num_layers, c.model_dim, c.num_heads, c.ffn_dim,
            c.vocab_size, c.max_seq_len, c.seed,
        )
        body = b"".join(
            np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in param_shapes(c)
        )
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Model":
        if blob[:4] != MAGIC:
            raise ValueError("not a KGA1 checkpoint")
        L, D, H, F, V, N, seed = struct.unpack_from("<6qQ", blob, 4)
        cfg = ModelConfig(L, D, H, F, V, N, seed)
        offset = 4 + struct.calcsize("<6qQ")
        params = {}
        for name, shape in param_shapes(cfg).items():
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            params[name] = arr.astype(np.float64).reshape(shape)
            offset += 8 * count
        if offset != len(blob):
            raise ValueError("checkpoint has trailing or missing bytes")
        return cls(cfg, params)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_bytes(Path(path).read_bytes())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass
class External:
    """Per-layer keys/values injected into every query's attention.

    ``keys[l]`` and ``values[l]`` have shape ``[H, m, dh]``.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]

    @property
    def length(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0

    @property
    def nbytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values))

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "External":
        z = np.zeros((cfg.num_heads, 0, cfg.head_dim))
        return cls([z] * cfg.num_layers, [z] * cfg.num_layers)


@dataclass
class LayerStates:
    """Per-request record of a forward pass.

    Per layer: ``hidden`` is the residual-stream input ``[n, D]``;
    ``queries``/``keys``/``values`` are ``[H, n, dh]``; ``attn_out`` is the
    concatenated head output before the output projection ``[n, D]``.
    ``weights`` holds, per layer, one ``[H, nq, nk]`` block per call and is
    only filled when tracing.
    """

    num_layers: int
    hidden: list = field(default_factory=list)
    queries: list = field(default_factory=list)
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    attn_out: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    positions: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("hidden", "queries", "keys", "values", "attn_out", "weights"):
            if not getattr(self, name):
                setattr(self, name, [None] * self.num_layers)
        self.weights = [w if w is not None else [] for w in self.weights]

    @property
    def length(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[1]

    @property
    def next_position(self) -> int:
        return self.positions[-1] + 1 if self.positions else 0

    @property
    def kv_bytes(self) -> int:
        if self.keys[0] is None:
            return 0
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values))


def _append(old, new, axis):
    return new if old is None else np.concatenate([old, new], axis=axis)


def attend(q, k, v, *, start: int, ext_k=None, ext_v=None, cross=False,
           counter: AttentionCounter | None = None):
    """Multi-head attention for queries at absolute cache offsets ``start..``.

    ``k``/``v`` hold the cached plus new input entries; query ``i`` sees input
    keys ``0..start+i`` and all external keys. Returns ``(out, weights)`` with
    ``weights`` over ``[input keys | external keys]`` (input part omitted in
    cross mode).
    """
    H, nq, dh = q.shape
    scale = 1.0 / np.sqrt(dh)
    has_ext = ext_k is not None and ext_k.shape[1] > 0
    if cross:
        if not has_ext:
            raise ValueError("cross attention needs external keys")
        keys, vals = ext_k, ext_v
    elif has_ext:
        keys = np.concatenate([k, ext_k], axis=1)
        vals = np.concatenate([v, ext_v], axis=1)
    else:
        keys, vals = k, v
    nk = keys.shape[1]
    n_in = 0 if cross else k.shape[1]
    outs, weights = [], []
    for lo in range(0, nq, QUERY_CHUNK):
        hi = min(nq, lo + QUERY_CHUNK)
        logits = (q[:, lo:hi] @ keys.transpose(0, 2, 1)) * scale
        if cross:
            w = softmax_rows(logits)
        else:
            qpos = start + np.arange(lo, hi)[:, None]
            kidx = np.arange(nk)[None, :]
            visible = (kidx <= qpos) | (kidx >= n_in)
            w = softmax_rows(logits, visible[None])
        outs.append(w @ vals)
        weights.append(w)
    if counter is not None:
        counter.add(attention_flops(H, nq, nk, dh))
    out = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
    w = weights[0] if len(weights) == 1 else np.concatenate(weights, axis=1)
    return out, w


def forward(model: Model, tokens, states: LayerStates | None = None, *,
            positions=None, external: External | None = None, cross: bool = False,
            trace: bool = False, counter: AttentionCounter | None = None):
    """Process ``tokens`` after whatever ``states`` already holds.

    Returns ``(logits [n, V], states)``. ``states`` is updated in place.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if states is None:
        states = LayerStates(cfg.num_layers)
    n = tokens.shape[0]
    if positions is None:
        positions = np.arange(states.next_position, states.next_position + n)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (n,):
        raise ValueError("positions must match tokens")
    if states.length + n > cfg.max_seq_len:
        raise CapacityError(
            f"{states.length + n} tokens exceed max_seq_len={cfg.max_seq_len}")
    if n and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")

    H = cfg.num_heads
    E = model.params["tok_emb"]
    x = E[tokens] * np.sqrt(cfg.model_dim) + sinusoidal_positions(positions, cfg.model_dim)
    start = states.length
    for l in range(cfg.num_layers):
        p = model.layer(l)
        states.hidden[l] = _append(states.hidden[l], x, 0)
        a = layer_norm(x, p["ln1.g"], p["ln1.b"])
        q = split_heads(a @ p["attn.wq"], H)
        k = split_heads(a @ p["attn.wk"], H)
        v = split_heads(a @ p["attn.wv"], H)
        states.queries[l] = _append(states.queries[l], q, 1)
        states.keys[l] = _append(states.keys[l], k, 1)
        states.values[l] = _append(states.values[l], v, 1)
        ek = ev = None
        if external is not None:
            ek, ev = external.keys[l], external.values[l]
        o, w = attend(q, states.keys[l], states.values[l], start=start,
                      ext_k=ek, ext_v=ev, cross=cross, counter=counter)
        o = merge_heads(o)
        states.attn_out[l] = _append(states.attn_out[l], o, 0)
        if trace:
            states.weights[l].append(w)
        x = x + o @ p["attn.wo"]
        c = layer_norm(x, p["ln2.g"], p["ln2.b"])
        x = x + gelu(c @ p["ffn.w1"] + p["ffn.b1"]) @ p["ffn.w2"] + p["ffn.b2"]
    states.positions.extend(int(t) for t in positions)
    z = layer_norm(x, model.params["ln_f.g"], model.params["ln_f.b"])
    if counter is not None:
        ext_bytes = external.nbytes if external is not None else 0
        counter.observe_kv(states.kv_bytes + ext_bytes)
    return z @ E.T, states


def forward_lm(model: Model, tokens, trace: bool = False, *, positions=None,
               counter: AttentionCounter | None = None):
    """Plain causal forward over one sequence starting from an empty cache."""
    return forward(model, tokens, positions=positions, trace=trace, counter=counter)


def causal_self_attention(model: Model, layer: int, states: LayerStates, n: int) -> np.ndarray:
    """Attention output of position ``n`` (1-based) at ``layer``, before the
    output projection, recomputed from the cached queries/keys/values."""
    if not 1 <= n <= states.length:
        raise OrderingError(f"position {n} not populated (have {states.length})")
    q = states.queries[layer][:, n - 1:n]
    out, _ = attend(q, states.keys[layer][:, :n], states.values[layer][:, :n], start=n - 1)
    return merge_heads(out)[0]


def greedy_decode(model: Model, prompt, max_new: int, *, positions=None,
                  external: External | None = None, cross: bool = False,
                  stop_ids=(3, 4), counter: AttentionCounter | None = None) -> list[int]:
    """Argmax continuation of ``prompt``; the terminator is not returned.

    ``stop_ids`` defaults to ``<sep>`` and ``<ans>``; pass ``()`` to force
    exactly ``max_new`` steps.
    """
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if max_new <= 0:
        return []
    if counter is not None:
        counter.stage = "prefill"
    logits, states = forward(model, prompt, positions=positions, external=external,
                             cross=cross, counter=counter)
    out: list[int] = []
    if counter is not None:
        counter.stage = "decode"
    for step in range(max_new):
        nxt = int(np.argmax(logits[-1]))
        if nxt in stop_ids:
            break
        out.append(nxt)
        if step + 1 == max_new or states.length >= model.config.max_seq_len:
            break
        logits, states = forward(model, [nxt], states, external=external,
                                 cross=cross, counter=counter)
    return out
