"""Multi-scale cross-attention fusion for discrete-time survival prediction.

The package is organized around the pipeline stages:

- ``tensor``: float64 autodiff engine (the sole numeric carrier)
- ``layers``: linear / multi-head attention / transformer building blocks
- ``model``: the fusion architecture, its ablation variants, checkpoints
- ``survival``: discrete-time loss, C-index, Kaplan-Meier, log-rank
- ``data``: feature-bag container format, manifest, synthetic generator
- ``train``: Adam with warm-up, the per-fold loop, evaluation reports
- ``cli``: command-line entry point and report/figure emission
"""

from .tensor import Tensor, no_grad, finite_diff_check
from .model import ModelConfig, SurvivalOutput, forward, attention_maps
from .data import FeatureBag, SynthConfig, read_bag, write_bag, synth_generate, kfold_split

__all__ = [
    "Tensor",
    "no_grad",
    "finite_diff_check",
    "ModelConfig",
    "SurvivalOutput",
    "forward",
    "attention_maps",
    "FeatureBag",
    "SynthConfig",
    "read_bag",
    "write_bag",
    "synth_generate",
    "kfold_split",
]
