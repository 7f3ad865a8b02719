"""Safe-control synthesis toolkit: learned dynamics, an imitation controller
cloned from a receding-horizon expert, a neural integral control barrier
function over the joint state-input space, closed-form safe-input filtering,
and empirical error-bound certification."""

__version__ = "0.1.0"
