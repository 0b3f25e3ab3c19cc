"""Training, evaluation, experiment runners and the command-line interface."""
