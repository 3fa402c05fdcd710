"""Learning-to-optimize planner."""
