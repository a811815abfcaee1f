"""Per-slice progression model: age binning, networks, losses and training."""
from .binning import AgeBinning, build_age_binning, membership
from .losses import (
    LOSS_NAMES,
    adversarial_terms,
    loss_adv_brain,
    loss_adv_latent,
    loss_rec,
    loss_reg,
    loss_total,
    loss_vox,
    sample_prior,
)
from .training import (
    ConstantSchedule,
    RegionContext,
    SliceData,
    SliceModelBundle,
    TrainConfig,
    TrainingDivergence,
    evaluate_losses,
    generate_sequence,
    train_slice_model,
)
