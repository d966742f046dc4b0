"""Segmentation with local mixture and global Gaussian latent spaces."""

from .backbone import Backbone, BackboneConfig, FeaturePyramid, ShapeError
from .data import IGNORE_INDEX, DatasetManifest, Sample, SceneSpec, generate_dataset, generate_scene, load_sample
from .latent import GaussianParams, LatentConfig, MixtureParams
from .losses import LossWeights, kl_gaussian_pair, kl_gaussian_standard, kl_mixture_matched, kl_mixture_mc, seg_loss
from .model import PHGMM, ModelConfig
from .trainer import TrainConfig, Trainer, evaluate, gradcheck

__version__ = "0.1.0"
