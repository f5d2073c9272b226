"""Backdoor detection and removal through minimal latent-space perturbations."""
