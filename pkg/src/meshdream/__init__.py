"""Text-to-3D optimization at desk scale: tetrahedral SDF geometry and PBR
materials driven by score distillation through a frozen toy denoiser with
camera-guided low-rank adapters and attention-mask alignment."""

__version__ = "0.1.0"
