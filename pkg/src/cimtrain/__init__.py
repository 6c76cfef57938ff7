"""Hardware-constrained quantized training for NVM crossbar accelerators.

Networks are trained with globally shared quantization ranges (one DAC/ADC
design for every hidden layer) and optionally unipolar weights, mapped onto
fixed-size crossbar tiles, simulated through the analog path, and costed
with a calibrated energy/area model.
"""
__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: F401
