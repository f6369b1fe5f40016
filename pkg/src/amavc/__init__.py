"""Average-model voice conversion with a speaker-embedding cycle consistency loss."""

__version__ = "0.1.0"
