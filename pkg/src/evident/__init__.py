"""evident: evidential uncertainty for dense pointmap regression.

Closed-form NIW/NIG evidential heads with Student-t predictives, gated
residual mean refinement, a small seeded trainer, Sim(3) alignment, and the
full selective-prediction metric suite (risk-coverage/AURC, sparsification/
AUSE, Spearman rho, NLL, point-cloud distances, ring-band AUROC).
"""

__version__ = "0.1.0"
