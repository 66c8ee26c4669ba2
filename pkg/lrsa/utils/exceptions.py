"""
Exceptions raised by the engine, the cache and the harness.
"""

class LrsaError(Exception):
    """ Base class for all engine errors """
    pass

class DimensionError(LrsaError):
    """ Raised when operand shapes do not agree """
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        LrsaError.__init__(self, '%s: incompatible shapes %s' %(op, ' and '.join(str(s) for s in self.shapes)))

class DegenerateRowError(LrsaError):
    """ Raised when a softmax slice holds only -inf, i.e. a fully masked query """
    pass

class GatherIndexError(LrsaError):
    """ Raised for out-of-range or non-ascending gather indices """
    pass

class GradientError(LrsaError):
    """ Raised when backward is called on a non-scalar, twice, or on a cyclic graph """
    pass

class PositionError(LrsaError):
    """ Raised when appended cache positions do not continue the sequence """
    pass

class SequencingError(LrsaError):
    """ Raised when a chunk mask is requested before its retention sets exist """
    pass

class TokenRangeError(LrsaError):
    """ Raised for token ids outside the vocabulary """
    pass

class DivergenceError(LrsaError):
    """ Raised when the training loss becomes non-finite """
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        LrsaError.__init__(self, 'Loss diverged at step %d (loss=%s)' %(step, loss))

class CheckpointError(LrsaError):
    """ Raised for unreadable checkpoints or cache snapshots """
    pass

class ConfigError(LrsaError):
    """ Raised with every configuration violation found in one validation pass """
    def __init__(self, violations):
        self.violations = list(violations)
        LrsaError.__init__(self, 'Invalid configuration:\n  ' + '\n  '.join(self.violations))
