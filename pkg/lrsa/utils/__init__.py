from .data_utils import set_log_level, write_json, read_json, read_token_file
from .enums import GeneralConstants, Precision, AttentionMode, TaskType
from .exceptions import (LrsaError, DimensionError, DegenerateRowError, GatherIndexError, GradientError,
                         PositionError, SequencingError, TokenRangeError, DivergenceError, CheckpointError,
                         ConfigError)
from .train_stats_logger import TrainStatsLogger

__all__ = ['set_log_level', 'write_json', 'read_json', 'read_token_file',
           'GeneralConstants', 'Precision', 'AttentionMode', 'TaskType',
           'LrsaError', 'DimensionError', 'DegenerateRowError', 'GatherIndexError', 'GradientError',
           'PositionError', 'SequencingError', 'TokenRangeError', 'DivergenceError', 'CheckpointError',
           'ConfigError',
           'TrainStatsLogger']
