"""Tiny autoregressive transformer policy with exact analytic gradients.

Pre-norm transformer (RMSNorm, learned positional embeddings, tanh-GELU MLP)
implemented directly on float64 numpy arrays, with a hand-written backward
pass. Everything is deterministic given seeds; the backward pass is checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

_NEG_INF = -1e30
_RMS_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)

CHECKPOINT_MAGIC = b"RFLPOLICY1\n"


class EncodeError(ValueError):
    """Text contains a span not covered by the vocabulary."""


class LengthError(ValueError):
    """Sequence does not fit the model context."""


class SpanError(ValueError):
    """Span indices fall outside the sequence or start before position 1."""


# --- vocabulary -------------------------------------------------------------

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT = "<|system|>", "<|user|>", "<|assistant|>"
RESERVED = (PAD, BOS, EOS, ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT)


@dataclass(frozen=True)
class Vocab:
    """Ordered token strings; reserved tokens render as '' when decoding."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens")
        for name in RESERVED:
            if name not in self.tokens:
                raise ValueError(f"reserved token {name} missing")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        by_first: dict[str, list[str]] = {}
        for tok in self.tokens:
            if tok not in RESERVED:
                by_first.setdefault(tok[0], []).append(tok)
        for bucket in by_first.values():
            bucket.sort(key=len, reverse=True)
        object.__setattr__(self, "_by_first", by_first)
        object.__setattr__(self, "_encode_cache", {})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    def role_id(self, role: str) -> int:
        return self._index[{"system": ROLE_SYSTEM, "user": ROLE_USER, "assistant": ROLE_ASSISTANT}[role]]

    def encode(self, text: str) -> list[int]:
        """Greedy longest-match tokenization; raises EncodeError on gaps."""
        cached = self._encode_cache.get(text)
        if cached is not None:
            return list(cached)
        ids = []
        pos = 0
        while pos < len(text):
            for tok in self._by_first.get(text[pos], ()):
                if text.startswith(tok, pos):
                    ids.append(self._index[tok])
                    pos += len(tok)
                    break
            else:
                raise EncodeError(f"cannot encode {text[pos:pos + 20]!r}")
        if len(self._encode_cache) > 200_000:
            self._encode_cache.clear()
        self._encode_cache[text] = tuple(ids)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return "".join("" if self.tokens[i] in RESERVED else self.tokens[i] for i in ids)


def countdown_vocab() -> Vocab:
    """Symbol-level vocabulary over the mini equation-writing conversations.

    Fixed template sentences are single phrase tokens so that whole rendered
    conversations stay short; everything that varies (numbers, expressions)
    is covered by single-character tokens.
    """
    from . import tasks

    boxed = tasks.COUNTDOWN_TEMPLATE.system
    user = tasks.COUNTDOWN_TEMPLATE.first_user
    head, rest = user.split("{numbers}")
    mid, tail = rest.split("{target}")
    phrases = (
        boxed,  # system message
        head,   # "Using the numbers "
        mid,    # ", create an equation that equals "
        tail,   # ". You can use ... \boxed{}."
        tasks.COUNTDOWN_TEMPLATE.reflection,
    )
    symbols = tuple("0123456789+-*/()[], ") + ("}", "\\boxed{")
    return Vocab(tokens=RESERVED + symbols + phrases)


# --- parameters --------------------------------------------------------------


@dataclass(frozen=True)
class PolicyConfig:
    layers: int = 4
    width: int = 128
    heads: int = 4
    context: int = 512

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    max_new_tokens: int = 64
    seed: int = 0
    stop_strings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class PolicyParams:
    config: PolicyConfig
    vocab: Vocab
    weights: dict[str, np.ndarray] = field(repr=False)

    def copy(self) -> "PolicyParams":
        return replace(self, weights={k: v.copy() for k, v in self.weights.items()})


def _weight_shapes(cfg: PolicyConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    d = cfg.width
    shapes = {"wte": (vocab_size, d), "wpe": (cfg.context, d)}
    for i in range(cfg.layers):
        shapes[f"l{i}.ln1"] = (d,)
        shapes[f"l{i}.wq"] = (d, d)
        shapes[f"l{i}.wk"] = (d, d)
        shapes[f"l{i}.wv"] = (d, d)
        shapes[f"l{i}.wo"] = (d, d)
        shapes[f"l{i}.ln2"] = (d,)
        shapes[f"l{i}.w1"] = (d, 4 * d)
        shapes[f"l{i}.w2"] = (4 * d, d)
    shapes["lnf"] = (d,)
    shapes["head"] = (d, vocab_size)
    return shapes


def init_params(cfg: PolicyConfig, vocab: Vocab, seed: int, std: float = 0.02) -> PolicyParams:
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _weight_shapes(cfg, len(vocab)).items():
        if name.endswith(("ln1", "ln2", "lnf")):
            weights[name] = np.ones(shape)
        else:
            weights[name] = rng.normal(0.0, std, size=shape)
    return PolicyParams(config=cfg, vocab=vocab, weights=weights)


def zero_params(cfg: PolicyConfig, vocab: Vocab) -> PolicyParams:
    weights = {
        name: (np.ones(shape) if name.endswith(("ln1", "ln2", "lnf")) else np.zeros(shape))
        for name, shape in _weight_shapes(cfg, len(vocab)).items()
    }
    return PolicyParams(config=cfg, vocab=vocab, weights=weights)


def zero_grads(params: PolicyParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.weights.items()}


# --- forward -----------------------------------------------------------------


def _rmsnorm(x: np.ndarray, gain: np.ndarray):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _RMS_EPS)
    return (x * r) * gain, r


def _gelu_forward(z: np.ndarray) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """tanh-form GELU; returns the activation plus reusable intermediates."""
    zz = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * zz))
    return 0.5 * z * (1.0 + t), (t, zz)


def _gelu(z: np.ndarray) -> np.ndarray:
    return _gelu_forward(z)[0]


def _gelu_grad(z: np.ndarray, inter: Optional[tuple[np.ndarray, np.ndarray]] = None) -> np.ndarray:
    t, zz = inter if inter is not None else _gelu_forward(z)[1]
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * zz)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def forward_batch(
    params: PolicyParams,
    ids: np.ndarray,
    pos_ids: Optional[np.ndarray] = None,
    kv_valid: Optional[np.ndarray] = None,
    want_cache: bool = False,
):
    """Causal batched forward over padded id arrays.

    kv_valid marks positions usable as attention keys (False for padding);
    pos_ids supplies logical positions when sequences are left-padded.
    Returns logits (B, T, V), plus the activation cache when requested.
    """
    w = params.weights
    cfg = params.config
    ids = np.asarray(ids)
    b, t = ids.shape
    if t > cfg.context:
        raise LengthError(f"sequence length {t} exceeds context {cfg.context}")
    if pos_ids is None:
        pos_ids = np.broadcast_to(np.arange(t), (b, t))
    if kv_valid is None:
        kv_valid = np.ones((b, t), dtype=bool)

    hd = cfg.width // cfg.heads
    causal = np.tril(np.ones((t, t), dtype=bool))
    allowed = causal[None, None, :, :] & kv_valid[:, None, None, :]

    x = w["wte"][ids] + w["wpe"][pos_ids]
    cache = {"ids": ids, "pos_ids": pos_ids, "allowed": allowed, "x0": x, "layers": []}
    for i in range(cfg.layers):
        n1, r1 = _rmsnorm(x, w[f"l{i}.ln1"])
        q = _split_heads(n1 @ w[f"l{i}.wq"], cfg.heads)
        k = _split_heads(n1 @ w[f"l{i}.wk"], cfg.heads)
        v = _split_heads(n1 @ w[f"l{i}.wv"], cfg.heads)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(hd)
        scores = np.where(allowed, scores, _NEG_INF)
        probs = _softmax(scores)
        attn = _merge_heads(probs @ v)
        x_mid = x + attn @ w[f"l{i}.wo"]
        n2, r2 = _rmsnorm(x_mid, w[f"l{i}.ln2"])
        z1 = n2 @ w[f"l{i}.w1"]
        m1, gelu_inter = _gelu_forward(z1)
        x_out = x_mid + m1 @ w[f"l{i}.w2"]
        cache["layers"].append(
            {"x_in": x, "n1": n1, "r1": r1, "q": q, "k": k, "v": v, "probs": probs,
             "attn": attn, "x_mid": x_mid, "n2": n2, "r2": r2, "z1": z1, "m1": m1,
             "gelu": gelu_inter}
        )
        x = x_out
    nf, rf = _rmsnorm(x, w["lnf"])
    cache["x_last"] = x
    cache["nf"] = nf
    cache["rf"] = rf
    logits = nf @ w["head"]
    if want_cache:
        return logits, cache
    return logits


def forward(params: PolicyParams, tokens: Sequence[int]) -> np.ndarray:
    """Per-position logits for one sequence; position i sees tokens <= i."""
    return forward_batch(params, np.asarray(tokens, dtype=int)[None, :])[0]


def log_probs(params: PolicyParams, tokens: Sequence[int], span: tuple[int, int]) -> np.ndarray:
    """Log-probabilities of tokens[start:end], each conditioned on its prefix."""
    start, end = span
    n = len(tokens)
    if start == end:
        return np.zeros(0)
    if not (1 <= start < end <= n):
        raise SpanError(f"span {span} invalid for length {n}")
    logits = forward(params, tokens)
    rows = _log_softmax(logits[start - 1 : end - 1])
    return rows[np.arange(end - start), np.asarray(tokens[start:end], dtype=int)]


def log_probs_batch(
    params: PolicyParams,
    sequences: Sequence[Sequence[int]],
    spans: Sequence[tuple[int, int]],
) -> list[np.ndarray]:
    """Span log-probs for many sequences via one padded forward."""
    if len(sequences) != len(spans):
        raise ValueError("one span per sequence required")
    if not sequences:
        return []
    for seq, (start, end) in zip(sequences, spans):
        if start != end and not (1 <= start < end <= len(seq)):
            raise SpanError(f"span {(start, end)} invalid for length {len(seq)}")
    pad = params.vocab.pad_id
    t_max = max(len(s) for s in sequences)
    ids = np.full((len(sequences), t_max), pad, dtype=int)
    valid = np.zeros((len(sequences), t_max), dtype=bool)
    for b, seq in enumerate(sequences):
        ids[b, : len(seq)] = seq
        valid[b, : len(seq)] = True
    logits = forward_batch(params, ids, kv_valid=valid)
    out = []
    for b, (start, end) in enumerate(spans):
        if start == end:
            out.append(np.zeros(0))
            continue
        rows = _log_softmax(logits[b, start - 1 : end - 1])
        out.append(rows[np.arange(end - start), ids[b, start:end]])
    return out


# --- backward ----------------------------------------------------------------


def _rmsnorm_backward(dy: np.ndarray, x: np.ndarray, r: np.ndarray, gain: np.ndarray):
    xhat = x * r
    dgain = np.sum(dy * xhat, axis=(0, 1))
    dxhat = dy * gain
    d = x.shape[-1]
    dx = dxhat * r - x * (r**3 / d) * np.sum(dxhat * x, axis=-1, keepdims=True)
    return dx, dgain


def _outer_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_{b,t} a[b,t]^T b[b,t] as one BLAS call."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def backward_batch(params: PolicyParams, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of sum(dlogits * logits) w.r.t. every weight array."""
    w = params.weights
    cfg = params.config
    hd = cfg.width // cfg.heads
    grads = zero_grads(params)

    nf = cache["nf"]
    grads["head"] = _outer_grad(nf, dlogits)
    dnf = dlogits @ w["head"].T
    dx, grads["lnf"] = _rmsnorm_backward(dnf, cache["x_last"], cache["rf"], w["lnf"])

    for i in reversed(range(cfg.layers)):
        lc = cache["layers"][i]
        # MLP block
        dm1 = dx @ w[f"l{i}.w2"].T
        grads[f"l{i}.w2"] = _outer_grad(lc["m1"], dx)
        dz1 = dm1 * _gelu_grad(lc["z1"], lc["gelu"])
        grads[f"l{i}.w1"] = _outer_grad(lc["n2"], dz1)
        dn2 = dz1 @ w[f"l{i}.w1"].T
        dx_mid, grads[f"l{i}.ln2"] = _rmsnorm_backward(dn2, lc["x_mid"], lc["r2"], w[f"l{i}.ln2"])
        dx_mid = dx_mid + dx  # residual
        # attention block
        dattn = dx_mid @ w[f"l{i}.wo"].T
        grads[f"l{i}.wo"] = _outer_grad(lc["attn"], dx_mid)
        da = _split_heads(dattn, cfg.heads)
        dprobs = da @ lc["v"].transpose(0, 1, 3, 2)
        dv = lc["probs"].transpose(0, 1, 3, 2) @ da
        p = lc["probs"]
        dscores = p * (dprobs - np.sum(dprobs * p, axis=-1, keepdims=True))
        dq = dscores @ lc["k"] / math.sqrt(hd)
        dk = dscores.transpose(0, 1, 3, 2) @ lc["q"] / math.sqrt(hd)
        dq_f, dk_f, dv_f = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        n1 = lc["n1"]
        grads[f"l{i}.wq"] = _outer_grad(n1, dq_f)
        grads[f"l{i}.wk"] = _outer_grad(n1, dk_f)
        grads[f"l{i}.wv"] = _outer_grad(n1, dv_f)
        dn1 = dq_f @ w[f"l{i}.wq"].T + dk_f @ w[f"l{i}.wk"].T + dv_f @ w[f"l{i}.wv"].T
        dx_in, grads[f"l{i}.ln1"] = _rmsnorm_backward(dn1, lc["x_in"], lc["r1"], w[f"l{i}.ln1"])
        dx = dx_in + dx_mid  # residual

    np.add.at(grads["wte"], cache["ids"], dx)
    np.add.at(grads["wpe"], cache["pos_ids"], dx)
    return grads


def logprob_gradient(
    params: PolicyParams,
    sequences: Sequence[Sequence[int]],
    weights: Sequence[dict[int, float]],
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients for a weighted sum of token log-probabilities.

    loss = sum_b sum_{i in weights[b]} weights[b][i] * log p(sequences[b][i] | prefix).
    Any loss that is a function of log-probs reduces to this form by passing
    its per-token partial derivatives as the weights.
    """
    if len(sequences) != len(weights):
        raise ValueError("one weight mapping per sequence required")
    if not sequences or all(not ws for ws in weights):
        return 0.0, zero_grads(params)
    pad = params.vocab.pad_id
    t_max = max(len(s) for s in sequences)
    ids = np.full((len(sequences), t_max), pad, dtype=int)
    valid = np.zeros((len(sequences), t_max), dtype=bool)
    for b, seq in enumerate(sequences):
        ids[b, : len(seq)] = seq
        valid[b, : len(seq)] = True
        for i in weights[b]:
            if not 1 <= i < len(seq):
                raise SpanError(f"weighted position {i} outside sequence {b}")

    logits, cache = forward_batch(params, ids, kv_valid=valid, want_cache=True)
    logsoft = _log_softmax(logits)
    soft = np.exp(logsoft)
    dlogits = np.zeros_like(logits)
    loss = 0.0
    for b, ws in enumerate(weights):
        for i, weight in ws.items():
            tok = ids[b, i]
            loss += weight * logsoft[b, i - 1, tok]
            dlogits[b, i - 1, tok] += weight
            dlogits[b, i - 1, :] -= weight * soft[b, i - 1, :]
    return float(loss), backward_batch(params, cache, dlogits)


# --- sampling ----------------------------------------------------------------


def _pack_prompts(prompts: Sequence[Sequence[int]], pad: int):
    """Left-pad to a common length so every row generates at the same index."""
    t_max = max(len(p) for p in prompts)
    b = len(prompts)
    ids = np.full((b, t_max), pad, dtype=int)
    valid = np.zeros((b, t_max), dtype=bool)
    pos = np.zeros((b, t_max), dtype=int)
    offsets = np.zeros(b, dtype=int)
    for i, p in enumerate(prompts):
        off = t_max - len(p)
        offsets[i] = off
        ids[i, off:] = p
        valid[i, off:] = True
        pos[i, off:] = np.arange(len(p))
    return ids, valid, pos, offsets


def sample_batch(
    params: PolicyParams,
    prompts: Sequence[Sequence[int]],
    cfg: SamplingConfig,
    seeds: Optional[Sequence[int]] = None,
    return_logprobs: bool = False,
):
    """Sample continuations for many prompts in lockstep.

    Each row draws from its own seeded generator, so results do not depend on
    how prompts are batched. Stops on <eos>, configured stop strings, the
    per-call token budget, or the context bound.
    """
    cfgC = params.config.context
    vocab = params.vocab
    for p in prompts:
        if len(p) == 0:
            raise ValueError("empty prompt")
        if len(p) > cfgC:
            raise LengthError(f"prompt length {len(p)} exceeds context {cfgC}")
    if seeds is None:
        seeds = [cfg.seed + i for i in range(len(prompts))]
    if len(seeds) != len(prompts):
        raise ValueError("one seed per prompt required")

    b = len(prompts)
    w = params.weights
    heads, d = params.config.heads, params.config.width
    hd = d // heads
    ids, valid, pos, offsets = _pack_prompts(prompts, vocab.pad_id)
    t0 = ids.shape[1]
    budget = min(cfg.max_new_tokens, cfgC - t0 + int(offsets.min()))
    rngs = [np.random.default_rng(s) for s in seeds]

    logits, cache = forward_batch(params, ids, pos_ids=pos, kv_valid=valid, want_cache=True)
    keys = [lc["k"] for lc in cache["layers"]]  # (B, h, T, hd) each
    vals = [lc["v"] for lc in cache["layers"]]
    col_valid = valid.copy()

    generated: list[list[int]] = [[] for _ in range(b)]
    logps: list[list[float]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    last_logits = logits[:, -1, :]
    last_ids = ids[:, -1].copy()

    for step in range(max(budget, 0)):
        logsoft = _log_softmax(last_logits)
        if cfg.temperature == 0:
            choice = np.argmax(last_logits, axis=-1)
        else:
            probs = _softmax(last_logits / cfg.temperature)
            cum = np.cumsum(probs, axis=-1)
            choice = np.empty(b, dtype=int)
            for i in range(b):
                choice[i] = int(np.searchsorted(cum[i], rngs[i].random(), side="right"))
        choice = np.minimum(choice, len(vocab) - 1)
        for i in range(b):
            if done[i]:
                continue
            generated[i].append(int(choice[i]))
            logps[i].append(float(logsoft[i, choice[i]]))
            if choice[i] == vocab.eos_id:
                done[i] = True
            elif cfg.stop_strings:
                text = vocab.decode(generated[i])
                if any(text.endswith(s) for s in cfg.stop_strings):
                    done[i] = True
        if done.all():
            break
        t_cur = t0 + step
        if t_cur >= cfgC + int(offsets.min()):
            break

        # incremental forward for the newly chosen tokens
        new_ids = np.where(done, vocab.pad_id, choice)
        new_pos = np.minimum(t_cur - offsets, cfgC - 1)
        x = w["wte"][new_ids] + w["wpe"][new_pos]  # (B, d)
        col_valid = np.concatenate([col_valid, (~done)[:, None]], axis=1)
        overflow = (t_cur - offsets) >= cfgC
        col_valid[:, -1] &= ~overflow
        done |= overflow
        for li in range(params.config.layers):
            n1, _ = _rmsnorm(x, w[f"l{li}.ln1"])
            q = (n1 @ w[f"l{li}.wq"]).reshape(b, heads, 1, hd)
            k = (n1 @ w[f"l{li}.wk"]).reshape(b, heads, 1, hd)
            v = (n1 @ w[f"l{li}.wv"]).reshape(b, heads, 1, hd)
            keys[li] = np.concatenate([keys[li], k], axis=2)
            vals[li] = np.concatenate([vals[li], v], axis=2)
            scores = (q * keys[li]).sum(-1) / math.sqrt(hd)  # (B, h, T)
            scores = np.where(col_valid[:, None, :], scores, _NEG_INF)
            probs = _softmax(scores)
            attn = np.einsum("bht,bhtd->bhd", probs, vals[li]).reshape(b, d)
            x = x + attn @ w[f"l{li}.wo"]
            n2, _ = _rmsnorm(x, w[f"l{li}.ln2"])
            x = x + _gelu(n2 @ w[f"l{li}.w1"]) @ w[f"l{li}.w2"]
        nf, _ = _rmsnorm(x, w["lnf"])
        last_logits = nf @ w["head"]
        last_ids = new_ids

    if return_logprobs:
        return generated, [np.asarray(lp) for lp in logps]
    return generated


def sample(params: PolicyParams, prompt: Sequence[int], cfg: SamplingConfig) -> list[int]:
    """Generate a continuation for one prompt; deterministic given cfg.seed."""
    return sample_batch(params, [list(prompt)], cfg, seeds=[cfg.seed])[0]


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(
    path,
    params: PolicyParams,
    extra_arrays: Optional[dict[str, np.ndarray]] = None,
    extra_meta: Optional[dict] = None,
) -> None:
    """Write a self-describing, byte-stable container (header JSON + raw f8)."""
    arrays = dict(params.weights)
    for name, arr in (extra_arrays or {}).items():
        arrays[f"extra.{name}"] = arr
    manifest = []
    offset = 0
    order = sorted(arrays)
    for name in order:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        arrays[name] = arr
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "format": 1,
        "config": {
            "layers": params.config.layers,
            "width": params.config.width,
            "heads": params.config.heads,
            "context": params.config.context,
        },
        "vocab": list(params.vocab.tokens),
        "arrays": manifest,
        "meta": extra_meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name in order:
            fh.write(arrays[name].tobytes())


def load_checkpoint(path) -> tuple[PolicyParams, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a policy checkpoint")
    n = len(CHECKPOINT_MAGIC)
    blob_len = int.from_bytes(data[n : n + 8], "little")
    header = json.loads(data[n + 8 : n + 8 + blob_len].decode("utf-8"))
    if header.get("format") != 1:
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    base = n + 8 + blob_len
    weights, extra = {}, {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(shape).copy()
        if entry["name"].startswith("extra."):
            extra[entry["name"][len("extra."):]] = arr
        else:
            weights[entry["name"]] = arr
    cfg = PolicyConfig(**header["config"])
    params = PolicyParams(config=cfg, vocab=Vocab(tokens=tuple(header["vocab"])), weights=weights)
    return params, extra, header.get("meta", {})
