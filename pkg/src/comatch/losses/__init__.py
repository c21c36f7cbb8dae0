from .coseg import (
    bce,
    contrastive_loss,
    contrastive_terms,
    figure_ground_split,
    task_consistency_loss,
)
from .matching import (
    correspondence_mask,
    cycle_loss,
    match_score,
    matching_loss,
    resize_mask,
    trans_loss,
)

__all__ = [
    "bce",
    "contrastive_loss",
    "contrastive_terms",
    "correspondence_mask",
    "cycle_loss",
    "figure_ground_split",
    "match_score",
    "matching_loss",
    "resize_mask",
    "task_consistency_loss",
    "trans_loss",
]
