"""
Command line entry point.

    lrsa <command> [--config FILE] [--seed N] [--precision f32|f64] [--mode vanilla|lrsa] [--out DIR]
                   [--<dotted.field> VALUE ...]

Commands: equivalence, bench, train, score-dump, gen-task, grad-check, eval.
Exit status is 0 iff every check of the command passes.
"""
import argparse
import logging
import os
import sys

from .harness import (cmd_bench, cmd_equivalence, cmd_eval, cmd_gen_task, cmd_grad_check, cmd_score_dump,
                      cmd_train, load_config, parse_overrides)
from .utils import LrsaError, read_token_file, set_log_level

COMMANDS = ['equivalence', 'bench', 'train', 'score-dump', 'gen-task', 'grad-check', 'eval']

def build_parser():
    parser = argparse.ArgumentParser(prog='lrsa',
                                     description='Lag-relative sparse attention: equivalence checks, benchmarks, training and evaluation')
    parser.add_argument('command', type=str, choices=COMMANDS,
                        help='experiment to run')
    parser.add_argument('--config', type=str, default=None,
                        help='path to a YAML or JSON configuration file')
    parser.add_argument('--seed', type=int, default=None,
                        help='random seed')
    parser.add_argument('--precision', type=str, default=None, choices=['f32', 'f64'],
                        help='floating point precision')
    parser.add_argument('--mode', type=str, default=None, choices=['vanilla', 'lrsa'],
                        help='attention mode for training')
    parser.add_argument('--out', type=str, default=None,
                        help='directory for reports and artifacts')
    parser.add_argument('--steps', type=int, default=None,
                        help='training steps, shorthand for --train.steps')
    parser.add_argument('--tokens', type=str, default=None,
                        help='JSON token file for score-dump')
    parser.add_argument('--checkpoint', type=str, default=None,
                        help='model checkpoint for eval')
    return parser

def main(argv=None):
    """ Runs one command and returns the process exit status """
    if argv is None:
        argv = sys.argv[1:]
    logging.basicConfig(format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        set_log_level()
    except ValueError as e:
        logging.getLogger().setLevel(logging.INFO)
        logging.warning('%s, using info' %(e))

    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(rest)
        for name, value in [('seed', args.seed), ('precision', args.precision), ('mode', args.mode),
                            ('output_dir', args.out), ('train.steps', args.steps)]:
            if value is not None:
                overrides.append((name, value))
        config_filename = args.config
        if config_filename is not None and not os.path.isabs(config_filename):
            config_filename = os.path.join(os.getcwd(), config_filename)
        config = load_config(config_filename, overrides)

        if args.command == 'equivalence':
            report = cmd_equivalence(config)
        elif args.command == 'bench':
            report = cmd_bench(config)
        elif args.command == 'train':
            report = cmd_train(config)
        elif args.command == 'score-dump':
            tokens = read_token_file(args.tokens) if args.tokens is not None else None
            report = cmd_score_dump(config, tokens)
        elif args.command == 'gen-task':
            report = cmd_gen_task(config)
        elif args.command == 'grad-check':
            report = cmd_grad_check(config)
        elif args.command == 'eval':
            if args.checkpoint is None:
                parser.error('eval requires --checkpoint')
            report = cmd_eval(config, args.checkpoint)
        else:
            raise ValueError('Command %s not supported' %(args.command))
    except LrsaError as e:
        logging.error(str(e))
        return 2
    return 0 if report['pass'] else 1

if __name__ == '__main__':
    sys.exit(main())
