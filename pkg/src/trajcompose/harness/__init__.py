"""Training, rollout, evaluation protocols and the command line."""
