__version__ = "0.1.0"

from jpave.Classes import *  # noqa
from jpave.JpaveCls import JpaveCls  # noqa
from jpave.JpaveGen import JpaveGen  # noqa
from jpave.Training import Checkpoint  # noqa
from jpave.Training import TrainConfig  # noqa
from jpave.Training import train  # noqa
