"""A desk-scale lab for studying the order of pruning, quantization and sharing."""
import logging

__version__ = "0.1.0"

logger = logging.getLogger("ordlab")
logger.addHandler(logging.NullHandler())
