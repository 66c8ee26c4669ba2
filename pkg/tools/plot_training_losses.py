"""
Script to overlay the loss curves saved during training, e.g. a vanilla run
and an LRSA run of the same configuration.

Required Parameters
------------------------
result_dirs : str
    Command line arguments, the output directories of the training runs to plot. Each must hold a
    loss_curve.csv. The figure is saved to the first directory.
"""
import argparse
import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from lrsa.utils import TrainStatsLogger

LOSS_CURVE_FILENAME = 'loss_curve.csv'
WINDOW = 10

def windowed(values, window):
    """ Mean over consecutive windows of a curve """
    values = np.asarray(values)
    return np.array([np.mean(values[i:i+window]) for i in range(0, values.shape[0], window)])

if __name__ == '__main__':
    logging.getLogger().setLevel(logging.INFO)

    parser = argparse.ArgumentParser(description='Overlay training loss curves')
    parser.add_argument('result_dirs', type=str, nargs='+',
                        help='training output directories')
    parser.add_argument('--labels', type=str, nargs='*', default=None,
                        help='legend labels, one per directory')
    parser.add_argument('--window', type=int, default=WINDOW,
                        help='number of steps averaged per plotted point')
    args = parser.parse_args()
    labels = args.labels if args.labels else [os.path.basename(os.path.normpath(d)) for d in args.result_dirs]

    plt.figure(figsize=(8,6))
    for result_dir, label in zip(args.result_dirs, labels):
        steps, lrs, losses = TrainStatsLogger.load(os.path.join(result_dir, LOSS_CURVE_FILENAME))
        if len(losses) == 0:
            logging.warning('No losses in %s' %(result_dir))
            continue
        logging.info('%s: orig loss %.4f, final loss %.4f' %(label, losses[0], losses[-1]))
        plt.plot(np.asarray(steps)[::args.window], windowed(losses, args.window), linewidth=2, label=label)
    plt.legend(fontsize=15, loc='best')
    plt.xlabel('Iteration', fontsize=15)
    plt.ylabel('Training Loss', fontsize=15)
    filename = os.path.join(args.result_dirs[0], 'training_curve.png')
    plt.savefig(filename)
    logging.info('Saved %s' %(filename))
