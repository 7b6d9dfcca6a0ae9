"""Traffic event recognition on distributed acoustic sensing records.

Synthetic scene generation, preprocessing, handcrafted window features,
recurrent models with spatial/temporal self-attention, and the training,
ablation and transfer protocols built on them.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DasError, FormatError, NonFiniteError  # noqa: E402,F401
