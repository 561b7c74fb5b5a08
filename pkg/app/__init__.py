"""meshsim: hierarchical mesh-graph surrogate with a finite-element oracle."""
