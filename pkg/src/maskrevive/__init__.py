"""Weight revival from pruning footprints, Gaussian mask obfuscation, and benchmarks."""

__version__ = "0.1.0"
