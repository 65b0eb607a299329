"""straightflow: flow matching with trainable interpolants.

Learns a velocity field and an invertible interpolant jointly so that the
probability-flow trajectories become straight, which makes few-step (even
single-step) ODE sampling accurate. Public surface: the FlowMatcher
estimator, the interpolant families, the training entry points, and a CLI.
"""

__version__ = "0.1.0"

__all__ = ["FlowMatcher", "__version__"]


def __getattr__(name):
    # lazy import keeps `import straightflow` light for CLI startup
    if name == "FlowMatcher":
        from .estimator import FlowMatcher

        return FlowMatcher
    raise AttributeError(f"module 'straightflow' has no attribute {name!r}")
