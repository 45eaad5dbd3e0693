"""Double-detector GAN laboratory for feature-addition adversarial malware."""

__version__ = "0.1.0"
