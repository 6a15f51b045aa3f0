"""Multi-modal VAE objectives: term compiler, training engine and analytic oracles."""

from .compiler import (Likelihood, LossExpression, LossTerm, Modality, ModalitySet, TermKind, Variant,
                       coefficient, expand, expand_jmvae, expand_jmvae3_style, expand_joint, expand_m2vae,
                       expand_m2vae_bruteforce, expand_vanilla, parse_expression, render)
from .distributions import DiagGaussian, RngStream
from .nets import ModelBundle, build_bundle, forward_objective, grad_check

__version__ = "0.1.0"
