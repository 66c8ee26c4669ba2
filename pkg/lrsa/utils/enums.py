"""
Constants and enums shared across the engine.
"""
import numpy as np

# other constants
class GeneralConstants:
    SEED = 3472134
    JSON_INDENT = 2
    CHECKPOINT_MAGIC = b'LRSA'
    CHECKPOINT_VERSION = 1
    SNAPSHOT_MAGIC = b'LRKV'
    SNAPSHOT_VERSION = 1

# enum for numeric precision
class Precision:
    F32 = 'f32'
    F64 = 'f64'

    @staticmethod
    def dtype(precision):
        if precision == Precision.F32:
            return np.float32
        elif precision == Precision.F64:
            return np.float64
        raise ValueError('Precision %s not supported' %(precision))

# enum for attention modes
class AttentionMode:
    VANILLA = 'vanilla'
    LRSA = 'lrsa'

# enum for synthetic tasks
class TaskType:
    COPY = 'copy'
    NEEDLE = 'needle'
