"""Neural signed-distance scanning: joint shape and pose optimization
from structured-light coordinate maps, with a synthetic data oracle."""

__version__ = "0.1.0"
