"""
Prints the tensor directory of a model checkpoint, or the contents of one tensor.
"""
import argparse
import sys

import numpy as np

from lrsa.model import load_checkpoint
from lrsa.utils import CheckpointError

def print_tensors_in_checkpoint_file(file_name, tensor_name, all_tensors):
    """Prints tensors in a checkpoint file.

    If no `tensor_name` is provided, prints the tensor names and shapes
    in the checkpoint file.

    If `tensor_name` is provided, prints the content of the tensor.
    """
    try:
        model = load_checkpoint(file_name)
    except (CheckpointError, IOError) as e:
        print(str(e))
        return 1
    if tensor_name:
        if tensor_name not in model.weights:
            print('No tensor named %s' %(tensor_name))
            return 1
        print('tensor_name: ', tensor_name)
        print(model.weights[tensor_name].data)
        return 0
    for name, w in model.weights.items():
        print('tensor_name: %s shape: %s' %(name, w.shape))
        if all_tensors:
            print(w.data)
    print('TOTAL PARAMS: {}'.format(model.num_parameters))
    print('lagkv: {}'.format(model.lagkv_params))
    return 0

if __name__ == '__main__':
    parser = argparse.ArgumentParser()
    parser.add_argument('file_name', type=str,
                        help='checkpoint filename')
    parser.add_argument('--tensor_name', type=str, default='',
                        help='name of the tensor to inspect')
    parser.add_argument('--all_tensors', action='store_true',
                        help='print the values of all the tensors')
    parser.add_argument('--precision', type=int, default=None,
                        help='digits printed per value')
    args = parser.parse_args()
    if args.precision is not None:
        np.set_printoptions(precision=args.precision)
    sys.exit(print_tensors_in_checkpoint_file(args.file_name, args.tensor_name, args.all_tensors))
