"""NT-Xent contrastive loss over pair-adjacent feature batches.

Matches the reference numerical definition used on the reconstruction side:
cosine similarity, the positive of anchor i is i^1, and the denominator runs
over every other sample in the 2N batch.
"""

from __future__ import annotations

import torch


def nt_xent(features: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean per-anchor loss for a (2N, D) batch where rows 2k/2k+1 are a pair."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    n2 = features.shape[0]
    if n2 < 2 or n2 % 2 != 0:
        raise ValueError("need an even number (>= 2) of feature vectors")
    z = torch.nn.functional.normalize(features, dim=1)
    logits = z @ z.T / temperature
    logits.fill_diagonal_(float("-inf"))
    pos = torch.arange(n2, device=features.device) ^ 1
    log_prob = logits[torch.arange(n2), pos] - torch.logsumexp(logits, dim=1)
    return -log_prob.mean()
