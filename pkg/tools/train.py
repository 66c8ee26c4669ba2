"""
Script for training the toy transformer on a synthetic task in vanilla and
LRSA attention mode from the same seed, one output directory per mode, so the
two loss curves can be overlaid with tools/plot_training_losses.py.

Required Parameters
------------------------
output_dir : str
    Command line argument, the parent directory of the per-mode runs.
"""
import argparse
import logging
import os
import time

import autolab_core.utils as utils
from lrsa.harness import cmd_train, load_config
from lrsa.utils import AttentionMode, set_log_level

if __name__ == '__main__':
    # setup logger
    logging.basicConfig(format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    set_log_level()

    # parse args
    parser = argparse.ArgumentParser(description='Train vanilla and LRSA attention models on a synthetic task')
    parser.add_argument('output_dir', type=str,
                        help='parent directory of the per-mode training runs')
    parser.add_argument('--config_filename', type=str, default=None,
                        help='path to the configuration file to use')
    parser.add_argument('--seed', type=int, default=None,
                        help='random seed for model initialization and tasks')
    parser.add_argument('--steps', type=int, default=None,
                        help='number of optimizer steps')
    parser.add_argument('--modes', type=str, nargs='+', default=[AttentionMode.VANILLA, AttentionMode.LRSA],
                        help='attention modes to train')
    args = parser.parse_args()
    output_dir = args.output_dir
    config_filename = args.config_filename

    # set default config filename
    if config_filename is None:
        config_filename = os.path.join(os.path.dirname(os.path.realpath(__file__)),
                                       '..',
                                       'cfg/lrsa.yaml')

    # turn relative paths absolute
    if not os.path.isabs(output_dir):
        output_dir = os.path.join(os.getcwd(), output_dir)
    if not os.path.isabs(config_filename):
        config_filename = os.path.join(os.getcwd(), config_filename)
    utils.mkdir_safe(output_dir)

    overrides = []
    if args.seed is not None:
        overrides.append(('seed', args.seed))
    if args.steps is not None:
        overrides.append(('train.steps', args.steps))

    for mode in args.modes:
        start_time = time.time()
        run_dir = os.path.join(output_dir, mode)
        config = load_config(config_filename, overrides + [('mode', mode), ('output_dir', run_dir)])
        report = cmd_train(config)
        logging.info('%s: final loss %s, diverged %s' %(mode, report['final_loss'], report['diverged']))
        logging.info('Total Training Time: ' + str(utils.get_elapsed_time(time.time() - start_time)))
