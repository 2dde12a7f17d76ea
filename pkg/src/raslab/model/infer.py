"""No-grad inference: encoder forward and cached greedy/temperature decoding.

Mirrors the training graph math exactly (same normalization, masking, and
projection order) but works on plain arrays for one sequence at a time, so
decoding is cheap and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .transformer import ModelConfig, SequenceTooLong, StudentModel
from .vocab import BOS_ID, EOS_ID, PAD_ID


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"            # "greedy" or "temperature"
    temperature: float = 1.0
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.mode == "temperature" and not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be at least 1")


def _ln(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def encode_sequence(model: StudentModel, enc_ids: np.ndarray) -> np.ndarray:
    """Encoder output [S, d] for one unpadded id sequence."""
    p = model.param_arrays()
    cfg = model.config
    s = len(enc_ids)
    x = p["tok_emb"][enc_ids] + p["enc_pos"][:s]
    hd = cfg.d_model // cfg.n_heads
    for i in range(cfg.n_layers):
        normed = _ln(x, p[f"enc{i}.ln1.g"], p[f"enc{i}.ln1.b"])
        q = (normed @ p[f"enc{i}.attn.wq"]).reshape(s, cfg.n_heads, hd).transpose(1, 0, 2)
        k = (normed @ p[f"enc{i}.attn.wk"]).reshape(s, cfg.n_heads, hd).transpose(1, 0, 2)
        v = (normed @ p[f"enc{i}.attn.wv"]).reshape(s, cfg.n_heads, hd).transpose(1, 0, 2)
        attn = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(hd))
        ctx = (attn @ v).transpose(1, 0, 2).reshape(s, cfg.d_model)
        x = x + ctx @ p[f"enc{i}.attn.wo"]
        hidden = np.maximum(_ln(x, p[f"enc{i}.ln2.g"], p[f"enc{i}.ln2.b"]) @ p[f"enc{i}.ff.w1"]
                            + p[f"enc{i}.ff.b1"], 0.0)
        x = x + hidden @ p[f"enc{i}.ff.w2"] + p[f"enc{i}.ff.b2"]
    return _ln(x, p["enc_ln.g"], p["enc_ln.b"])


class DecoderState:
    """Per-sequence decoder with self-attention KV caches."""

    def __init__(self, model: StudentModel, enc_out: np.ndarray, max_steps: int):
        self.p = model.param_arrays()
        self.cfg: ModelConfig = model.config
        self.hd = self.cfg.d_model // self.cfg.n_heads
        self.scale = 1.0 / np.sqrt(self.hd)
        self.t = 0
        heads, hd, s = self.cfg.n_heads, self.hd, len(enc_out)
        self.self_k = [np.empty((heads, max_steps, hd)) for _ in range(self.cfg.n_layers)]
        self.self_v = [np.empty((heads, max_steps, hd)) for _ in range(self.cfg.n_layers)]
        self.cross_k = []
        self.cross_v = []
        for i in range(self.cfg.n_layers):
            ck = (enc_out @ self.p[f"dec{i}.cross.wk"]).reshape(s, heads, hd).transpose(1, 0, 2)
            cv = (enc_out @ self.p[f"dec{i}.cross.wv"]).reshape(s, heads, hd).transpose(1, 0, 2)
            self.cross_k.append(np.ascontiguousarray(ck.transpose(0, 2, 1)))  # [h, hd, S]
            self.cross_v.append(cv)                                           # [h, S, hd]

    def step(self, token_id: int) -> np.ndarray:
        """Feed one decoder token, return next-token logits [vocab]."""
        p, cfg, heads, hd = self.p, self.cfg, self.cfg.n_heads, self.hd
        x = p["tok_emb"][token_id] + p["dec_pos"][self.t]
        for i in range(cfg.n_layers):
            h1 = _ln(x, p[f"dec{i}.ln1.g"], p[f"dec{i}.ln1.b"])
            q = (h1 @ p[f"dec{i}.self.wq"]).reshape(heads, hd)
            self.self_k[i][:, self.t] = (h1 @ p[f"dec{i}.self.wk"]).reshape(heads, hd)
            self.self_v[i][:, self.t] = (h1 @ p[f"dec{i}.self.wv"]).reshape(heads, hd)
            keys = self.self_k[i][:, : self.t + 1]
            values = self.self_v[i][:, : self.t + 1]
            attn = _softmax((keys @ q[:, :, None])[:, :, 0] * self.scale, axis=1)
            ctx = (attn[:, None, :] @ values)[:, 0, :]
            x = x + ctx.reshape(cfg.d_model) @ p[f"dec{i}.self.wo"]

            h2 = _ln(x, p[f"dec{i}.ln2.g"], p[f"dec{i}.ln2.b"])
            q2 = (h2 @ p[f"dec{i}.cross.wq"]).reshape(heads, 1, hd)
            attn2 = _softmax((q2 @ self.cross_k[i])[:, 0, :] * self.scale, axis=1)
            ctx2 = (attn2[:, None, :] @ self.cross_v[i])[:, 0, :]
            x = x + ctx2.reshape(cfg.d_model) @ p[f"dec{i}.cross.wo"]

            h3 = _ln(x, p[f"dec{i}.ln3.g"], p[f"dec{i}.ln3.b"])
            hidden = np.maximum(h3 @ p[f"dec{i}.ff.w1"] + p[f"dec{i}.ff.b1"], 0.0)
            x = x + hidden @ p[f"dec{i}.ff.w2"] + p[f"dec{i}.ff.b2"]
        self.t += 1
        y = _ln(x, p["dec_ln.g"], p["dec_ln.b"])
        return y @ p["out.w"] + p["out.b"]


def decode(model: StudentModel, input_text: str, cfg: DecodeConfig) -> str:
    """Generate a label text for the given stage input.

    Greedy mode takes the argmax each step (ties resolve to the lowest token
    id); temperature mode samples from softmax(logits / temperature) with a
    generator seeded from cfg.seed. PAD and BOS are never emitted; EOS stops
    generation, as does the max-new-tokens cap.
    """
    enc_ids = np.asarray(model.vocab.encode(input_text), dtype=np.int64)
    if len(enc_ids) > model.config.max_len:
        raise SequenceTooLong(
            f"input is {len(enc_ids)} tokens, max {model.config.max_len}")
    if len(enc_ids) == 0:
        raise ValueError("input tokenized to nothing")
    steps = min(cfg.max_new_tokens, model.config.max_len - 1)
    enc_out = encode_sequence(model, enc_ids)
    state = DecoderState(model, enc_out, steps)
    rng = np.random.default_rng(cfg.seed) if cfg.mode == "temperature" else None
    out_ids: list[int] = []
    prev = BOS_ID
    for _ in range(steps):
        logits = state.step(prev)
        logits[PAD_ID] = -np.inf
        logits[BOS_ID] = -np.inf
        if cfg.mode == "greedy":
            token = int(np.argmax(logits))
        else:
            probs = _softmax(logits / cfg.temperature)
            cum = np.cumsum(probs)
            token = int(min(np.searchsorted(cum, rng.random(), side="right"),
                            len(cum) - 1))
        if token == EOS_ID:
            break
        out_ids.append(token)
        prev = token
    return model.vocab.decode(out_ids)
