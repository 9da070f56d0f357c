"""
Abstract base class for perceptual feature extractors
The VAE's perceptual loss talks to this interface only, so a pretrained
extractor can replace the default random-feature one without touching the loss.
"""

from abc import ABC, abstractmethod


class FeatureExtractorInterface(ABC):
    """
    Abstract base class for perceptual feature extractors
    All extractor implementations must inherit from this
    """

    @abstractmethod
    def extract(self, x):
        """
        Compute feature maps for an image batch

        Args:
            x: [N, 1, H, W] image tensor

        Returns:
            list of [N, C_k, H, W] feature tensors, same spatial size as x
        """
        pass

    @property
    @abstractmethod
    def name(self):
        """Short identifier recorded in checkpoints and logs"""
        pass
