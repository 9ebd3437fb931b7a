"""Quality control for in-situ soil moisture sensor time series.

Two flagging engines over a shared 15-minute data model:

* a rule engine combining geophysical threshold checks with spectral
  spike/break/constant detection built on Savitzky-Golay derivatives;
* a bidirectional-LSTM sequence labeler trained from scratch on
  manually flagged (or synthetic) observations.

Plus the synthetic corpus generator, training loop, and evaluation
machinery needed to compare the two at desk scale.
"""

__version__ = "0.1.0"

from soilqc.errors import ConfigError, DataError, NumericError

__all__ = ["ConfigError", "DataError", "NumericError", "__version__"]
