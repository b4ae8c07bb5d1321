"""Dual-polarization SAR flood segmentation with cross-polarization attention fusion.

A self-contained numpy stack: a reverse-mode autodiff engine, convolutional
layers, the fusion module, U-Net and autoencoder backbones, a synthetic
speckled benchmark, metrics, a training loop and a command-line interface.
"""
from .backbones import BACKBONES, FUSION_MODES, BackboneConfig, SegmentationNet, binarize
from .data import ChannelStandardizer, DualPolScene, PolarimetricFeatures, load_scene, make_features, save_scene
from .estimator import FloodSegmenter
from .metrics import ConfusionCounts, csi, f1, iou, oa, report
from .synth import SynthConfig, generate_benchmark, generate_scene
from .training import ExperimentConfig, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "BACKBONES", "FUSION_MODES", "BackboneConfig", "SegmentationNet", "binarize",
    "ChannelStandardizer", "DualPolScene", "PolarimetricFeatures", "load_scene", "make_features", "save_scene",
    "FloodSegmenter",
    "ConfusionCounts", "csi", "f1", "iou", "oa", "report",
    "SynthConfig", "generate_benchmark", "generate_scene",
    "ExperimentConfig", "run_ablation", "train",
]
