"""Class indices shared by every module: logit 0 is occupied, logit 1 is empty."""
import numpy as np

OCCUPIED = 0
EMPTY = 1
UNKNOWN = -1

NAMES = {OCCUPIED: "occupied", EMPTY: "empty", UNKNOWN: "unknown"}
CODES = {v: k for k, v in NAMES.items()}


def predict(posteriors: np.ndarray) -> np.ndarray:
    """Argmax over the two posteriors; an exact 0.5/0.5 tie resolves to empty."""
    posteriors = np.asarray(posteriors)
    return np.where(posteriors[:, OCCUPIED] > posteriors[:, EMPTY], OCCUPIED, EMPTY)
