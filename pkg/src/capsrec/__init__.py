"""CTR base models joint-trained with an interest-capsule auxiliary task.

Pure-numpy training stack: dual-segment item embeddings, behaviour-to-
interest dynamic routing, label-aware attention with a sampled-softmax
interest loss, two-pass gradient accumulation with delta mixing on the
auxiliary segment, and a seeded experiment harness (AUC, replication,
delta sweep, sequence-length ablation).
"""

__version__ = "0.1.0"
