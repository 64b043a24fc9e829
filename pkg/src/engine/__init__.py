"""Monte Carlo engine: coupled FLMM/GBM paths and control-variate estimators."""
