"""Market models: closed-form Margrabe analytics and finite-liquidity price impact."""
