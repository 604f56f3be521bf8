"""A tiny experiment that trains in well under a second."""

import dataclasses

from udon.config import ExperimentConfig
from udon.datagen import DomainSpec, Layout

TINY_DOMAINS = [DomainSpec(0, 4, 0.0, 30, "cue_discriminative", 0.3),
                DomainSpec(1, 5, 0.0, 30, "cue_noise", 0.3),
                DomainSpec(2, 6, 1.0, 60, "cue_noise", 0.3)]


def tiny_experiment(**changes) -> ExperimentConfig:
    cfg = ExperimentConfig(feature_dim=40, domains=list(TINY_DOMAINS), layout=Layout(),
                           backbone_hidden_dims=[32], backbone_out_dim=32, student_dim=16,
                           teacher_dim=32, batch_size=16, steps=40, refresh_period=5,
                           seeds=[0])
    return dataclasses.replace(cfg, **changes)
