from .data import (
    CAPTION_CLASSES,
    COLORS,
    EMPTY_CLASS_ID,
    IMAGE_SIZE,
    SHAPES,
    ShapeSample,
    caption_class_id,
    caption_for,
    generate_dataset,
    parse_caption,
)
from .bundle import ModelBundle, load_bundle, save_bundle
from .models import (
    ToyCodec,
    ToyDenoiser,
    ToyImageEncoder,
    ToySegmenter,
    ToyTextEncoder,
    perceptual_distance,
    random_bundle,
)
from .training import (
    TrainingDiverged,
    train_all,
    train_codec,
    train_denoiser,
    train_embedder,
    train_segmenter,
)

__all__ = [
    "CAPTION_CLASSES",
    "COLORS",
    "EMPTY_CLASS_ID",
    "IMAGE_SIZE",
    "SHAPES",
    "ShapeSample",
    "ModelBundle",
    "ToyCodec",
    "ToyDenoiser",
    "ToyImageEncoder",
    "ToySegmenter",
    "ToyTextEncoder",
    "TrainingDiverged",
    "caption_class_id",
    "caption_for",
    "generate_dataset",
    "load_bundle",
    "parse_caption",
    "perceptual_distance",
    "random_bundle",
    "save_bundle",
    "train_all",
    "train_codec",
    "train_denoiser",
    "train_embedder",
    "train_segmenter",
]
