"""
Factory functions to obtain the trainer class based on backend.
"""
import logging

from .trainer import AdamWState, LrsaTrainer, TrainConfig, adamw_step, cosine_lr, grad_check, train

def get_lrsa_trainer(backend='numpy'):
    # return desired trainer class based on backend
    if backend == 'numpy':
        logging.info('Initializing trainer with numpy as backend...')
        return LrsaTrainer
    else:
        raise ValueError('Invalid backend: {}'.format(backend))

__all__ = ['AdamWState', 'LrsaTrainer', 'TrainConfig', 'adamw_step', 'cosine_lr', 'grad_check', 'train',
           'get_lrsa_trainer']
