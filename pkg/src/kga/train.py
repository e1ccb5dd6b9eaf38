"""Batched forward/backward pass and Adam training loop for :class:`Model`."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import LN_EPS, Model, gelu, param_shapes, sinusoidal_positions
from .tensor import SeededRng

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BUCKET_BATCHES = 8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingSequence:
    """Token ids with explicit positions.

    ``loss_mask[t]`` says whether predicting ``tokens[t + 1]`` from prefix
    ``tokens[: t + 1]`` contributes to the loss.
    """

    tokens: np.ndarray
    positions: np.ndarray | None = None
    loss_mask: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        n = len(self.tokens)
        if n < 2:
            raise ValueError("training sequences need at least 2 tokens")
        if self.positions is None:
            self.positions = np.arange(n)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.loss_mask is None:
            self.loss_mask = np.ones(n - 1, dtype=bool)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.positions.shape != (n,) or self.loss_mask.shape != (n - 1,):
            raise ValueError("positions/loss_mask do not match tokens")


def collate(seqs: list[TrainingSequence], pad_id: int = 0):
    T = max(len(s.tokens) for s in seqs)
    B = len(seqs)
    tok = np.full((B, T), pad_id, dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    tgt = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    for b, s in enumerate(seqs):
        n = len(s.tokens)
        tok[b, :n] = s.tokens
        pos[b, :n] = s.positions
        tgt[b, : n - 1] = s.tokens[1:]
        mask[b, : n - 1] = s.loss_mask
    return tok, pos, tgt, mask


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc**2).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd)


def _ln_bwd(dy, g, cache):
    xh, rstd = cache
    D = xh.shape[-1]
    dg = (dy * xh).reshape(-1, D).sum(0)
    db = dy.reshape(-1, D).sum(0)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu_grad(u):
    c = np.sqrt(2.0 / np.pi)
    inner = c * (u + 0.044715 * u * u * u)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t**2) * c * (1.0 + 3 * 0.044715 * u * u)


def loss_and_grads(model: Model, tok, pos, tgt, mask, params=None):
    """Mean masked next-token cross-entropy and its gradient for every parameter.

    Returns ``(loss, grads, logits)`` where ``logits`` are the shifted
    log-domain scores at the supervised positions only, in row-major order.
    """
    P = model.params if params is None else params
    cfg = model.config
    B, T = tok.shape
    D, H, dh = cfg.model_dim, cfg.num_heads, cfg.head_dim
    E = P["tok_emb"]
    scale = 1.0 / np.sqrt(dh)
    causal = np.tril(np.ones((T, T), dtype=bool))

    pe = sinusoidal_positions(pos.reshape(-1), D).reshape(B, T, D)
    x = E[tok] * np.sqrt(D) + pe
    caches = []
    for l in range(cfg.num_layers):
        pre = f"layers.{l}."
        a, ln1 = _ln_fwd(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        q = (a @ P[pre + "attn.wq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (a @ P[pre + "attn.wk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (a @ P[pre + "attn.wv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(causal, s, -np.inf)
        s = s - s.max(-1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(-1, keepdims=True)
        o = (w @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        h = x + o @ P[pre + "attn.wo"]
        c, ln2 = _ln_fwd(h, P[pre + "ln2.g"], P[pre + "ln2.b"])
        u = c @ P[pre + "ffn.w1"] + P[pre + "ffn.b1"]
        g = gelu(u)
        x_next = h + g @ P[pre + "ffn.w2"] + P[pre + "ffn.b2"]
        caches.append((x, a, ln1, q, k, v, w, o, h, c, ln2, u, g))
        x = x_next
    # the LM head only runs where the loss is supervised
    sel = np.nonzero(mask.reshape(-1))[0]
    if sel.size == 0:
        raise TrainingError("batch has no supervised positions")
    xs = x.reshape(-1, D)[sel]
    weight = mask.reshape(-1)[sel]
    count = mask.sum()
    z, lnf = _ln_fwd(xs, P["ln_f.g"], P["ln_f.b"])
    logits = z @ E.T
    logits -= logits.max(-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    t_sel = tgt.reshape(-1)[sel]
    rows = np.arange(sel.size)
    loss = -(logp[rows, t_sel] * weight).sum() / count

    grads = {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}
    dlogits = np.exp(logp)
    dlogits[rows, t_sel] -= 1.0
    dlogits *= (weight / count)[:, None]
    grads["tok_emb"] += dlogits.T @ z
    dz = dlogits @ E
    dxs, grads["ln_f.g"], grads["ln_f.b"] = _ln_bwd(dz, P["ln_f.g"], lnf)
    dx = np.zeros((B * T, D))
    dx[sel] = dxs
    dx = dx.reshape(B, T, D)

    for l in reversed(range(cfg.num_layers)):
        pre = f"layers.{l}."
        x_in, a, ln1, q, k, v, w, o, h, c, ln2, u, g = caches[l]
        # feed-forward block
        grads[pre + "ffn.b2"] += dx.reshape(-1, D).sum(0)
        grads[pre + "ffn.w2"] += g.reshape(-1, g.shape[-1]).T @ dx.reshape(-1, D)
        du = (dx @ P[pre + "ffn.w2"].T) * _gelu_grad(u)
        grads[pre + "ffn.b1"] += du.reshape(-1, du.shape[-1]).sum(0)
        grads[pre + "ffn.w1"] += c.reshape(-1, D).T @ du.reshape(-1, du.shape[-1])
        dc = du @ P[pre + "ffn.w1"].T
        dh_, dg2, db2 = _ln_bwd(dc, P[pre + "ln2.g"], ln2)
        grads[pre + "ln2.g"] += dg2
        grads[pre + "ln2.b"] += db2
        dh_ = dh_ + dx
        # attention block
        grads[pre + "attn.wo"] += o.reshape(-1, D).T @ dh_.reshape(-1, D)
        do = (dh_ @ P[pre + "attn.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        dw = do @ v.transpose(0, 1, 3, 2)
        dv = w.transpose(0, 1, 3, 2) @ do
        ds = w * (dw - (dw * w).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq = dq.transpose(0, 2, 1, 3).reshape(B, T, D)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, T, D)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, T, D)
        a2 = a.reshape(-1, D)
        grads[pre + "attn.wq"] += a2.T @ dq.reshape(-1, D)
        grads[pre + "attn.wk"] += a2.T @ dk.reshape(-1, D)
        grads[pre + "attn.wv"] += a2.T @ dv.reshape(-1, D)
        da = (dq @ P[pre + "attn.wq"].T + dk @ P[pre + "attn.wk"].T
              + dv @ P[pre + "attn.wv"].T)
        dx_ln, dg1, db1 = _ln_bwd(da, P[pre + "ln1.g"], ln1)
        grads[pre + "ln1.g"] += dg1
        grads[pre + "ln1.b"] += db1
        dx = dh_ + dx_ln
    np.add.at(grads["tok_emb"], tok.reshape(-1), dx.reshape(-1, D) * np.sqrt(D))
    return loss, grads, logits


def train_lm(model: Model, corpus: list[TrainingSequence], steps: int, lr: float,
             batch: int, *, seed: int | None = None, clip: float = 1.0,
             log_every: int = 0) -> tuple[Model, list[float]]:
    """Adam on mean next-token cross-entropy over random minibatches.

    Returns the trained model (a new object) and the per-step loss curve.
    """
    if not corpus:
        raise TrainingError("empty corpus")
    if steps <= 0:
        return model, []
    rng = SeededRng(model.config.seed if seed is None else seed).spawn(7)
    params = {k: v.copy() for k, v in model.params.items()}
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    losses = []
    lengths = np.array([len(s.tokens) for s in corpus])
    queue: list[np.ndarray] = []
    for step in range(1, steps + 1):
        if not queue:
            # draw several batches at once and group them by length to cut padding
            pool = rng.integers(0, len(corpus), size=BUCKET_BATCHES * batch)
            pool = pool[np.argsort(lengths[pool], kind="stable")]
            queue = [pool[i:i + batch] for i in range(0, len(pool), batch)]
            queue = [queue[i] for i in rng.permutation(len(queue))]
        idx = queue.pop()
        tok, pos, tgt, mask = collate([corpus[i] for i in idx])
        loss, grads, _ = loss_and_grads(model, tok, pos, tgt, mask, params=params)
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        norm = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        factor = min(1.0, clip / (norm + 1e-12)) if clip else 1.0
        for k, g in grads.items():
            g = g * factor
            m1[k] = ADAM_BETA1 * m1[k] + (1 - ADAM_BETA1) * g
            m2[k] = ADAM_BETA2 * m2[k] + (1 - ADAM_BETA2) * g * g
            mhat = m1[k] / (1 - ADAM_BETA1**step)
            vhat = m2[k] / (1 - ADAM_BETA2**step)
            params[k] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        losses.append(float(loss))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    return Model(model.config, params), losses
