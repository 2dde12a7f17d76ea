from .vocab import (PAD_ID, BOS_ID, EOS_ID, UNK_ID, EmptyCorpus, Vocab,
                    build_vocab, detokenize, tokenize)
from .transformer import (Batch, ModelConfig, ModelError, SequenceTooLong,
                          ShapeMismatch, StudentModel, nll_loss_and_grad,
                          nll_loss_and_grad_batch, sequence_log_prob)
from .optim import AdamW
from .infer import DecodeConfig, DecoderState, decode, encode_sequence
from .checkpoint import (CheckpointError, CorruptChecksum, VersionMismatch,
                         load_checkpoint, save_checkpoint)

__all__ = [
    "PAD_ID", "BOS_ID", "EOS_ID", "UNK_ID", "EmptyCorpus", "Vocab",
    "build_vocab", "detokenize", "tokenize",
    "Batch", "ModelConfig", "ModelError", "SequenceTooLong", "ShapeMismatch",
    "StudentModel", "nll_loss_and_grad", "nll_loss_and_grad_batch",
    "sequence_log_prob",
    "AdamW",
    "DecodeConfig", "DecoderState", "decode", "encode_sequence",
    "CheckpointError", "CorruptChecksum", "VersionMismatch",
    "load_checkpoint", "save_checkpoint",
]
