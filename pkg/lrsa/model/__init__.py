"""
Factory functions to obtain the model class based on backend.
"""
import logging

from .transformer import ToyTransformer, load_checkpoint, save_checkpoint

def get_lrsa_model(backend='numpy'):
    # return desired model class based on backend
    if backend == 'numpy':
        logging.info('Initializing transformer with numpy as backend...')
        return ToyTransformer
    else:
        raise ValueError('Invalid backend: {}'.format(backend))

__all__ = ['ToyTransformer', 'get_lrsa_model', 'load_checkpoint', 'save_checkpoint']
