"""raslab: three-stage reasoning distillation with DPO self-reflection.

Dataset construction (recall / analyze / summarize stage formats), a compact
trainable seq2seq student, the interleaved acquisition schedule, preference
self-reflection with a DPO+NLL objective, and an ablation/evaluation harness
over a synthetic micro-world or remotely curated MCQ data.
"""

__version__ = "0.1.0"
