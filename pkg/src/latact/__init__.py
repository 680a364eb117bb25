"""Latent-action representation learning on synthetic multi-embodiment worlds.

Subpackages:
    autodiff   reverse-mode tensor engine (float32, tape-based)
    optim      AdamW with decoupled weight decay
    serialize  binary checkpoint format
    rng        named deterministic random streams
    nn         MLP stacks, AdaLN modulation, causal temporal conv, time embedding
    worldgen   synthetic data-generating processes, frame rendering, vMF sampling
    models     IDM / FDM / discriminator / action-to-latent controller
    training   loss assembly and training loops
    evaluate   image metrics, transfer eval, leakage, probes, recovery scores
    theory     numerical identifiability checks (Bessel, MGF, saddle, angles)
    cli        command-line entry points
"""

__version__ = "0.1.0"
