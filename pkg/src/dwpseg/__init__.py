"""Deep Weight Prior transfer learning for volumetric segmentation.

Source-domain 3D U-Nets donate their 3x3x3 kernels to a set of small
variational autoencoders; those act as an implicit prior when a variational
U-Net is fit on a handful of target-domain volumes.
"""

__version__ = "0.1.0"

from dwpseg.errors import ConfigError, FormatError, ModeError, SchedulerStateError, SpecError, VersionError

__all__ = [
    "ConfigError",
    "FormatError",
    "ModeError",
    "SchedulerStateError",
    "SpecError",
    "VersionError",
    "__version__",
]
