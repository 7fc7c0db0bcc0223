"""Command-line orchestration: training, evaluation, sweeps and hyperparameter search."""
