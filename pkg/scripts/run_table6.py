"""PGD against the random ensemble of four as 0..4 keys leak to the attacker."""
from _common import run

from encvit.harness import experiment_key_leak

if __name__ == "__main__":
    run(experiment_key_leak, __doc__, n=4)
