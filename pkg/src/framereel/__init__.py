"""Frame-directed toy video diffusion: an LLM director expands one prompt into
per-frame prompts, and a miniature latent-diffusion sampler turns them into a
short video whose self-attention couples the frames."""

__version__ = "0.1.0"
