"""Desk-scale BEV highway world model: simulator, dataset collection, diffusion
denoiser with mask conditioning, autoregressive sampler, physical-consistency
metrics, latency benchmark, and an interactive session server."""

__version__ = "0.1.0"
