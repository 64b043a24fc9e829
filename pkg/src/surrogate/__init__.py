"""Neural-network surrogate of the FLMM exchange-option price."""
