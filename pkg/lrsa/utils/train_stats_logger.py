"""
Handles logging of training statistics such as losses and learning rates.
"""
import csv
import os

class TrainStatsLogger(object):
    """ Class to log optimization losses and learning rates """

    FIELDS = ['step', 'lr', 'loss']

    def __init__(self, experiment_dir, filename='loss_curve.csv'):
        """
        Parameters
        ----------
        experiment_dir : str
            the experiment directory to save statistics to
        filename : str
            name of the csv file written by log
        """
        self.experiment_dir = experiment_dir
        self.filename = os.path.join(experiment_dir, filename)
        self.steps = []
        self.learning_rates = []
        self.train_losses = []

    def log(self):
        """ Write all of the statistics collected so far to the experiment directory """
        if not os.path.exists(self.experiment_dir):
            os.makedirs(self.experiment_dir)
        with open(self.filename, 'w') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(self.FIELDS)
            for step, lr, loss in zip(self.steps, self.learning_rates, self.train_losses):
                writer.writerow([step, repr(float(lr)), repr(float(loss))])

    def update(self, **stats):
        """ Update optimization statistics
        NOTE: Any statistic that is None in the argument dict will not be updated

        Parameters
        ----------
        stats : dict
            dict of statistics and values to be updated, keys among step, learning_rate, train_loss
        """
        for statistic in stats:
            if stats[statistic] is None:
                continue
            if statistic == 'step':
                self.steps.append(stats[statistic])
            elif statistic == 'learning_rate':
                self.learning_rates.append(stats[statistic])
            elif statistic == 'train_loss':
                self.train_losses.append(stats[statistic])
            else:
                raise ValueError('Statistic %s not supported' %(statistic))

    @staticmethod
    def load(filename):
        """ Reads a loss curve csv back as (steps, learning rates, losses) lists """
        steps, lrs, losses = [], [], []
        with open(filename, 'r') as f:
            for row in csv.DictReader(f):
                steps.append(int(row['step']))
                lrs.append(float(row['lr']))
                losses.append(float(row['loss']))
        return steps, lrs, losses
