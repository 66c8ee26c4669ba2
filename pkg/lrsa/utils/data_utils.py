"""
Simple utility functions
"""
import json
import logging
import os

import numpy as np

from .enums import GeneralConstants

def set_log_level(level=None):
    """ Sets the root log level from an explicit name or the LRSA_LOG environment variable """
    if level is None:
        level = os.environ.get('LRSA_LOG', 'INFO')
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ValueError('Log level %s not supported' %(level))
    logging.getLogger().setLevel(numeric)
    return numeric

def _to_builtin(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError('Object of type %s is not JSON serializable' %(type(obj).__name__))

def write_json(obj, filename):
    """ Writes an object holding numpy values as indented JSON """
    dirname = os.path.dirname(filename)
    if dirname and not os.path.exists(dirname):
        os.makedirs(dirname)
    with open(filename, 'w') as f:
        json.dump(obj, f, indent=GeneralConstants.JSON_INDENT, sort_keys=True, default=_to_builtin)

def read_json(filename):
    with open(filename, 'r') as f:
        return json.load(f)

def read_token_file(filename):
    """ Reads token ids from a JSON list or a task instance file with a 'tokens' field """
    obj = read_json(filename)
    if isinstance(obj, dict):
        obj = obj['tokens']
    return np.asarray(obj, dtype=np.int64)
