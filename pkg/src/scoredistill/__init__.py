"""Score distillation toolkit: autodiff, diffusion priors, image parameterizations,
a differentiable volumetric renderer and the scene optimization loop."""

__version__ = "0.1.0"
