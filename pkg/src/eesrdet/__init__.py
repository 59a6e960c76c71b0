"""Edge-enhanced super-resolution GAN coupled to a small-object detector."""

__version__ = "0.1.0"
