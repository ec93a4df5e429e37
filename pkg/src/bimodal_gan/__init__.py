"""Bi-modality image-pair synthesis with a sequential semi-supervised GAN."""

from .dataset import ImagePair, Image, PairedDataset, ToyParams, generate_toy_bimodal, load_paired_dataset
from .features import ComplexityScore, decide_order, frechet_distance, random_conv_extractor, synthesis_complexity
from .metrics import GroupedScore, MetricReport, evaluate_pairs, grouped_evaluation
from .networks import NetConfig, SequentialGenerator, build_critics, build_generator
from .trainer import TrainConfig, Trainer, synthesize, train

__version__ = "0.1.0"
