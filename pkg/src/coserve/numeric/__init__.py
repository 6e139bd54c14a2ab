from .transformer import (
    CacheDesync,
    EmptySequence,
    GradAudit,
    KvGradAccumulator,
    OrderingViolation,
    QkvCache,
    TinyModel,
    backward_full,
    backward_window,
    finetune_token_level,
    forward_full,
    forward_window,
    generative_loss,
    new_state,
    rel_err,
    verify_equivalence,
)
