"""Simulation and fitting toolkit for SAW-cavity optomechanics with single-photon emitters."""
