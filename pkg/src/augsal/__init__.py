"""Saliency prediction over a denoising backbone with saliency-guided
photometric edit augmentation."""

__version__ = "0.1.0"
