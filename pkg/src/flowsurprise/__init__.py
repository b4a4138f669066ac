"""Surprisal estimation with autoregressive diffusion likelihoods."""
