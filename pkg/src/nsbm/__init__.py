"""Neural stochastic block model toolkit."""
