"""Autoencoder reconstruction lab.

Feedforward, convolutional and latent-diffusion autoencoders with training,
objective evaluation and a blinded mean-opinion-score study backend.
"""

from ._core import (
    ClassMse,
    ConfigError,
    ConflictError,
    ContractError,
    DatasetIndex,
    DiffusionSettings,
    EpochRecord,
    EvalReport,
    InitScheme,
    IoError,
    LossWeights,
    Model,
    ModelFamily,
    ModelMos,
    ModelSpec,
    MosReport,
    NotFoundError,
    RatingItem,
    RatingRecord,
    RatingService,
    ShapeError,
    Split,
    TrainConfig,
    TrainingError,
    ValidationError,
    build_model,
    compute_mos,
    evaluate_mse,
    export_reconstructions,
    family_name,
    load_batch,
    load_checkpoint,
    make_synthetic,
    parse_family,
    per_image_mse,
    rating_items_from_export,
    read_rating_log,
    read_split_manifest,
    run_cli,
    scan,
    split,
    train,
    write_split_manifest,
)

__version__ = "0.1.0"
