"""Desk-scale unified latent dynamics action model.

Subpackages follow the pipeline: `worldsim` generates instruction-
conditioned episodes, `ingest`/`store` unify them into a canonical 10 Hz
store, `latent` provides the frozen visual encoders, `mmdit` is the
multi-modal flow-matching transformer, `trainer` the co-training loop, and
`evalcli` the samplers, rollouts, sweeps and visualizations.
"""

__version__ = "0.1.0"
