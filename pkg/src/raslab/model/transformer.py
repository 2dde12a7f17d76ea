"""Compact encoder-decoder attention model with hand-rolled backprop.

Pre-norm transformer, learned positions, shared token embedding between the
two stacks, ReLU feed-forward, zero-initialized output projection (a fresh
model is exactly uniform over the vocabulary). Everything is float64 and
seed-deterministic; there is no dropout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import BOS_ID, EOS_ID, PAD_ID, Vocab

NEG_INF = -1e30


class ModelError(Exception):
    pass


class SequenceTooLong(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.n_layers, self.d_model, self.n_heads,
               self.d_ff, self.max_len) < 1:
            raise ValueError("all config sizes must be positive")


def param_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init) triples; the order fixes rng consumption."""
    d, ff, vocab, length = config.d_model, config.d_ff, config.vocab_size, config.max_len
    spec: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (vocab, d), "normal"),
        ("enc_pos", (length, d), "normal"),
        ("dec_pos", (length, d), "normal"),
    ]

    def norm(prefix):
        spec.append((f"{prefix}.g", (d,), "ones"))
        spec.append((f"{prefix}.b", (d,), "zeros"))

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            spec.append((f"{prefix}.{w}", (d, d), "normal"))

    def ffn(prefix):
        spec.append((f"{prefix}.w1", (d, ff), "normal"))
        spec.append((f"{prefix}.b1", (ff,), "zeros"))
        spec.append((f"{prefix}.w2", (ff, d), "normal"))
        spec.append((f"{prefix}.b2", (d,), "zeros"))

    for i in range(config.n_layers):
        norm(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        norm(f"enc{i}.ln2")
        ffn(f"enc{i}.ff")
    norm("enc_ln")
    for i in range(config.n_layers):
        norm(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        norm(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        norm(f"dec{i}.ln3")
        ffn(f"dec{i}.ff")
    norm("dec_ln")
    spec.append(("out.w", (d, vocab), "zeros"))
    spec.append(("out.b", (vocab,), "zeros"))
    return spec


@dataclass
class Batch:
    """Padded id arrays for one training step."""

    enc_ids: np.ndarray        # [B, S] int64, PAD_ID padded
    dec_in: np.ndarray         # [B, T] int64, starts with BOS
    targets: np.ndarray        # [B, T] int64, ends with EOS, PAD_ID padded
    target_mask: np.ndarray    # [B, T] float64
    label_lengths: np.ndarray  # [B] int64, label tokens + 1 (the EOS step)


class StudentModel:
    """Trainable sequence-to-sequence student."""

    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0,
                 params: Optional[dict[str, np.ndarray]] = None):
        if len(vocab) != config.vocab_size:
            raise ValueError("config.vocab_size must match the vocabulary")
        self.config = config
        self.vocab = vocab
        self.params: dict[str, Tensor] = {}
        if params is None:
            rng = np.random.default_rng(seed)
            for name, shape, init in param_spec(config):
                if init == "normal":
                    if len(shape) == 2 and not name.endswith(("_emb", "_pos")):
                        # Xavier scale keeps tiny widths trainable.
                        std = np.sqrt(2.0 / (shape[0] + shape[1]))
                    else:
                        std = 0.1
                    data = rng.standard_normal(shape) * std
                elif init == "ones":
                    data = np.ones(shape)
                else:
                    data = np.zeros(shape)
                self.params[name] = ad.parameter(data)
        else:
            for name, shape, _ in param_spec(config):
                data = params[name]
                if tuple(data.shape) != shape:
                    raise ShapeMismatch(f"{name}: expected {shape}, got {data.shape}")
                self.params[name] = ad.parameter(np.array(data, dtype=np.float64))

    def clone(self) -> "StudentModel":
        return StudentModel(self.config, self.vocab,
                            params={n: p.data.copy() for n, p in self.params.items()})

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
            p._grad_owned = False

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }

    # --- tokenization helpers -----------------------------------------------

    def encode_pair(self, input_text: str, label_text: str) -> tuple[list[int], list[int]]:
        enc = self.vocab.encode(input_text)
        lab = self.vocab.encode(label_text)
        if len(enc) > self.config.max_len:
            raise SequenceTooLong(f"input is {len(enc)} tokens, max {self.config.max_len}")
        if len(lab) + 1 > self.config.max_len:
            raise SequenceTooLong(f"label is {len(lab)} tokens, max {self.config.max_len - 1}")
        if not enc:
            raise ValueError("input tokenized to nothing")
        return enc, lab

    @staticmethod
    def make_batch(id_pairs: Sequence[tuple[list[int], list[int]]]) -> Batch:
        batch = len(id_pairs)
        s_max = max(len(enc) for enc, _ in id_pairs)
        t_max = max(len(lab) for _, lab in id_pairs) + 1
        enc_ids = np.full((batch, s_max), PAD_ID, dtype=np.int64)
        dec_in = np.full((batch, t_max), PAD_ID, dtype=np.int64)
        targets = np.full((batch, t_max), PAD_ID, dtype=np.int64)
        mask = np.zeros((batch, t_max), dtype=np.float64)
        lengths = np.zeros(batch, dtype=np.int64)
        for row, (enc, lab) in enumerate(id_pairs):
            enc_ids[row, : len(enc)] = enc
            dec_in[row, 0] = BOS_ID
            dec_in[row, 1 : len(lab) + 1] = lab
            targets[row, : len(lab)] = lab
            targets[row, len(lab)] = EOS_ID
            mask[row, : len(lab) + 1] = 1.0
            lengths[row] = len(lab) + 1
        return Batch(enc_ids, dec_in, targets, mask, lengths)

    def batch_from_texts(self, pairs: Sequence[tuple[str, str]]) -> Batch:
        return self.make_batch([self.encode_pair(i, l) for i, l in pairs])

    # --- forward graph -------------------------------------------------------

    def _heads(self, x: Tensor, batch: int, length: int) -> Tensor:
        hd = self.config.d_model // self.config.n_heads
        x = ad.reshape(x, (batch, length, self.config.n_heads, hd))
        return ad.transpose(x, (0, 2, 1, 3))

    def _attention(self, prefix: str, queries: Tensor, keys_values: Tensor,
                   mask: Optional[np.ndarray]) -> Tensor:
        p = self.params
        b, tq, d = queries.shape
        tk = keys_values.shape[1]
        hd = d // self.config.n_heads
        q = self._heads(ad.matmul(queries, p[f"{prefix}.wq"]), b, tq)
        k = self._heads(ad.matmul(keys_values, p[f"{prefix}.wk"]), b, tk)
        v = self._heads(ad.matmul(keys_values, p[f"{prefix}.wv"]), b, tk)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        if mask is not None:
            scores = ad.add(scores, Tensor(mask))
        ctx = ad.matmul(ad.softmax_last(scores), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        return ad.matmul(ctx, p[f"{prefix}.wo"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hidden = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def encode_graph(self, enc_ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        b, s = enc_ids.shape
        pad_mask = np.where(enc_ids == PAD_ID, NEG_INF, 0.0)[:, None, None, :]
        x = ad.add(ad.embedding(self.params["tok_emb"], enc_ids),
                   ad.embedding(self.params["enc_pos"], np.arange(s)))
        for i in range(self.config.n_layers):
            normed = self._norm(f"enc{i}.ln1", x)
            x = ad.add(x, self._attention(f"enc{i}.attn", normed, normed, pad_mask))
            x = ad.add(x, self._ffn(f"enc{i}.ff", self._norm(f"enc{i}.ln2", x)))
        return self._norm("enc_ln", x), pad_mask

    def forward_graph(self, enc_ids: np.ndarray, dec_in: np.ndarray) -> Tensor:
        """Teacher-forced logits [B, T, vocab]."""
        enc_out, pad_mask = self.encode_graph(enc_ids)
        b, t = dec_in.shape
        causal = np.triu(np.full((t, t), NEG_INF), k=1)[None, None, :, :]
        x = ad.add(ad.embedding(self.params["tok_emb"], dec_in),
                   ad.embedding(self.params["dec_pos"], np.arange(t)))
        for i in range(self.config.n_layers):
            normed = self._norm(f"dec{i}.ln1", x)
            x = ad.add(x, self._attention(f"dec{i}.self", normed, normed, causal))
            x = ad.add(x, self._attention(f"dec{i}.cross", self._norm(f"dec{i}.ln2", x),
                                          enc_out, pad_mask))
            x = ad.add(x, self._ffn(f"dec{i}.ff", self._norm(f"dec{i}.ln3", x)))
        x = self._norm("dec_ln", x)
        return ad.add(ad.matmul(x, self.params["out.w"]), self.params["out.b"])

    def sequence_log_prob_sums(self, batch: Batch) -> Tensor:
        """Unnormalized per-sequence label log probabilities, graph-tracked."""
        logits = self.forward_graph(batch.enc_ids, batch.dec_in)
        log_probs = ad.log_softmax_last(logits)
        picked = ad.gather_last(log_probs, batch.targets)
        return ad.sum_axis(ad.mul(picked, Tensor(batch.target_mask)), 1)

    def nll_loss(self, batch: Batch) -> Tensor:
        """Mean over the batch of per-token (length-normalized) NLL."""
        sums = self.sequence_log_prob_sums(batch)
        per_example = ad.mul(sums, Tensor(-1.0 / batch.label_lengths))
        return ad.mean_all(per_example)

    def label_log_prob_graph(self, input_text: str, label_text: str) -> tuple[Tensor, int]:
        """Graph-tracked scalar sum of label log probs, plus the step count."""
        batch = self.batch_from_texts([(input_text, label_text)])
        return ad.sum_all(self.sequence_log_prob_sums(batch)), int(batch.label_lengths[0])

    def label_log_prob(self, input_text: str, label_text: str) -> tuple[float, int]:
        batch = self.batch_from_texts([(input_text, label_text)])
        return float(self.sequence_log_prob_sums(batch).data[0]), int(batch.label_lengths[0])


def sequence_log_prob(model: StudentModel, input_text: str, label_text: str) -> float:
    """Sum of label-token log probabilities (including the EOS step)."""
    batch = model.batch_from_texts([(input_text, label_text)])
    return float(model.sequence_log_prob_sums(batch).data[0])


def nll_loss_and_grad(
    model: StudentModel, pairs: Sequence[tuple[str, str]]
) -> tuple[float, dict[str, np.ndarray]]:
    if not pairs:
        raise ValueError("batch must be non-empty")
    return nll_loss_and_grad_batch(model, model.batch_from_texts(pairs))


def nll_loss_and_grad_batch(
    model: StudentModel, batch: Batch
) -> tuple[float, dict[str, np.ndarray]]:
    model.zero_grad()
    loss = model.nll_loss(batch)
    loss.backward()
    return loss.item(), model.grads()
