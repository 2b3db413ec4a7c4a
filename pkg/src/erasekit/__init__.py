"""erasekit: concept erasure for latent diffusion models.

Training-time concept embeddings are sampled from a convex manifold over
a prompt bank; reference-image latents are fused across spatial scales by
a small transformer; the denoiser is fine-tuned against a
negative-guidance target from a frozen snapshot. An evaluation harness
measures erasure strength (ASR) and related-concept preservation (MCP).
"""

__version__ = "0.1.0"
