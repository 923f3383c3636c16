from .classifier import ToyClassifier
from .data import background_image, concept_image, sample_training_batch
from .denoiser import DiffusionSchedule, MicroDenoiser, ToyDenoiser, reverse_sample, sample
from .testbed import Testbed, build_testbed, generation_accuracy, load_testbed, model_digest, save_testbed
from .vocab import PROMPT_TEMPLATES, ToyTextEncoder, ToyVocabulary, tokenize

__all__ = [
    "DiffusionSchedule",
    "MicroDenoiser",
    "PROMPT_TEMPLATES",
    "Testbed",
    "ToyClassifier",
    "ToyDenoiser",
    "ToyTextEncoder",
    "ToyVocabulary",
    "background_image",
    "build_testbed",
    "concept_image",
    "generation_accuracy",
    "load_testbed",
    "model_digest",
    "reverse_sample",
    "sample",
    "sample_training_batch",
    "save_testbed",
    "tokenize",
]
