"""Multi-objective one-shot search for small adversarially robust networks.

Pipeline: a weight-sharing supernet over ShuffleNetV2-style choice blocks is
trained with TRADES-YOPO, NSGA-II searches its subnets on (clean error,
adversarial error, parameter count), and layer-wise choice statistics of the
best subnets assemble a "Lego" architecture.
"""

__version__ = "0.1.0"

from .engine import Tape, Tensor  # noqa: E402,F401
from .space import FULL, MINI, Genome, decode, encode, get_preset  # noqa: E402,F401
