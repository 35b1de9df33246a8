"""Baseline, single encrypted model, simple and random ensembles of four."""
from _common import run

from encvit.harness import experiment_model_comparison

if __name__ == "__main__":
    run(experiment_model_comparison, __doc__, n=4)
