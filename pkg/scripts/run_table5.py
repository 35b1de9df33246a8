"""Simple and random ensembles with four and five sub-models."""
from _common import run

from encvit.harness import experiment_submodel_count

if __name__ == "__main__":
    run(experiment_submodel_count, __doc__, n_list=(4, 5))
